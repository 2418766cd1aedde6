import math

import numpy as np
import pytest

import distillforge as df


def small_params(seed=3):
    p = df.GeneratorParams()
    p.num_identities = 6
    p.samples_per_identity = 20
    p.seed = seed
    return p


def test_distill_example_and_triplet_value():
    v = df.distill_cls_loss([[1.0, 0.0]], [[3.0, 0.0]], [0], alpha=1.0, tau=3.0)
    assert v == pytest.approx(0.9432144027, abs=1e-9)
    assert df.triplet_loss([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], 0.4) == 3.4


def test_alpha_zero_reduces_to_softmax_loss():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    labels = [0, 1, 2, 3, 0]
    assert df.distill_cls_loss(s, t, labels, alpha=0.0) == df.softmax_loss(s, labels)
    np.testing.assert_array_equal(df.soft_predictions(s, 1.0), df.softmax_rows(s))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    labels = [1, 0, 3]
    value, grad = df.distill_cls_loss(s, t, labels, grad=True)
    assert grad.shape == s.shape
    h = 1e-6
    for idx in np.ndindex(s.shape):
        up, down = s.copy(), s.copy()
        up[idx] += h
        down[idx] -= h
        fd = (df.distill_cls_loss(up, t, labels) - df.distill_cls_loss(down, t, labels)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    assert value == df.distill_cls_loss(s, t, labels)


def test_uniform_cross_entropy_is_log_classes():
    c = 7
    uniform = np.full((1, c), 1.0 / c)
    onehot = np.eye(c)[[2]]
    assert df.cross_entropy(uniform, onehot) == pytest.approx(math.log(c), abs=1e-12)


def test_metrics():
    assert df.top1_accuracy([[0.0, 1.0], [2.0, 1.0]], [1, 0]) == 1.0
    assert df.nrmse([[3.0, 4.0, 1.0, 1.0]], [[0.0, 0.0, 1.0, 1.0]], [10.0]) == pytest.approx(0.25, abs=1e-12)
    e = np.array([[0.0, 0.0], [0.1, 0.0], [50.0, 50.0], [50.1, 50.0]])
    assert df.verification_top1(e, [0, 0, 1, 1]) == 1.0
    assert df.pair_verification_accuracy([1.0, 2.0], [3.0, 4.0]) == 1.0
    with pytest.raises(df.ContractError):
        df.nrmse([[0.0, 0.0, 1.0, 1.0]], [[0.0, 0.0, 1.0, 1.0]], [0.0])


def test_select_targets_on_reference_rows():
    assert df.select_targets({(0, 0): 3.29, (0, 1): 3.21, (1, 0): 3.54}, False) == (0.0, 1.0)
    assert df.select_targets({(0, 0): 79.51, (0, 1): 77.63, (1, 0): 79.96}, True) == (1.0, 0.0)


def test_generate_is_deterministic_and_split(tmp_path):
    a, b = df.generate(small_params()), df.generate(small_params())
    np.testing.assert_array_equal(a.train_features, b.train_features)
    assert a.train_features.shape == (6 * 16, 64)
    assert a.test_keypoints.shape == (6 * 4, 10)
    assert len(a) == 120
    path = tmp_path / "data.txt"
    df.save_dataset(a, path)
    c = df.load_dataset(path)
    np.testing.assert_array_equal(c.test_identities, a.test_identities)
    trip = df.make_triplets(a.train_identities, 10, 4)
    ids = a.train_identities
    assert trip.shape == (10, 3)
    assert all(ids[x] == ids[y] != ids[z] for x, y, z in trip)


def test_network_checkpoint_round_trip(tmp_path):
    spec = df.NetworkSpec().with_divisor(8)
    assert spec.divided_widths() == [32, 32, 16]
    net = df.Network.build(spec, 11)
    x = np.random.default_rng(2).normal(size=(4, 64))
    out = net.infer(x)
    assert out["logits"].shape == (4, 32)
    assert out["embedding"].shape == (4, 64)
    path = tmp_path / "net.ckpt"
    df.save_checkpoint(net, path)
    back = df.load_checkpoint(path)
    assert back.spec == spec
    np.testing.assert_array_equal(back.infer(x)["regression"], out["regression"])
    with pytest.raises(df.DimensionError):
        net.infer(np.zeros((2, 5)))


def test_nag_matches_scalar_reference():
    w, v, ref = 2.5, 0.0, []
    for _ in range(10):
        g = 1.7 * (w + 0.4)
        v = 0.9 * v - 0.1 * g
        w = w + 0.9 * v - 0.1 * g
        ref.append(w)
    got = df.nag_quadratic(2.5, 1.7, -0.4, 0.1, 0.9, 10)
    assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12


def test_run_experiment_small_plan_is_deterministic():
    overrides = [
        "generator.num_identities=6",
        "generator.samples_per_identity=20",
        "teacher.hidden_widths=32,16",
        "train.epochs_per_phase=1",
        "plan.divisors=2",
        "plan.pair_count=40",
    ]
    rows, selections = df.run_experiment(seed=4, overrides=overrides)
    again, _ = df.run_experiment(seed=4, overrides=overrides)
    assert rows == again
    names = {r["network"] for r in rows}
    assert {"cls:teacher", "cls:student/2", "ali:student/2", "verj:student/2"} <= names
    assert len(selections) == 6
    with pytest.raises(df.ParseError, match="distill.tau"):
        df.run_experiment(overrides=["distill.tau=-1"])


def test_config_keys_are_documented():
    keys = dict(df.config_keys())
    assert "distill.tau" in keys and keys["distill.tau"]
    assert "distill.tau = 3" in df.render_config()
