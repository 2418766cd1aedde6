"""Python access to the distillforge C++ core.

Arrays go in as float64 numpy arrays (1-D input is one row) and come back
as numpy arrays. Loss functions return a float, or ``(value, gradient)``
with respect to their first argument when called with ``grad=True``.
"""

import json

from ._distillforge import (
    ContractError,
    DataError,
    Dataset,
    DimensionError,
    EvaluationError,
    GeneratorParams,
    Network,
    NetworkSpec,
    ParameterError,
    ParseError,
    config_keys,
    cross_entropy,
    derive_seed,
    distill_cls_loss,
    euclidean_loss,
    evaluate,
    generate,
    hidden_match_loss,
    interocular_distances,
    load_checkpoint,
    load_dataset,
    make_triplets,
    nag_quadratic,
    nrmse,
    pair_verification_accuracy,
    render_config,
    save_checkpoint,
    save_dataset,
    select_targets,
    soft_predictions,
    softmax_loss,
    softmax_rows,
    top1_accuracy,
    triplet_loss,
    verification_top1,
)
from ._distillforge import run_experiment as _run_experiment


def run_experiment(seed=0, config_text="", overrides=()):
    """Runs the experiment plan and returns ``(report_rows, selections)``.

    ``overrides`` are ``key=value`` strings, as given to ``--set`` on the
    command line. Both results are decoded from the JSON the CLI writes.
    """
    report, selections = _run_experiment(seed, config_text, list(overrides))
    return json.loads(report), json.loads(selections)


__all__ = [name for name in dir() if not name.startswith("_") and name != "json"]
