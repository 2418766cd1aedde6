#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/losses.hpp"
#include "distillforge/metrics.hpp"
#include "distillforge/nets.hpp"
#include "distillforge/synth_data.hpp"

namespace distillforge {

// ---- optimizer ------------------------------------------------------------

struct OptimizerState {
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::vector<std::vector<double>> velocity;  // one per parameter, lazily sized

  void validate() const;
};

/**
 * Nesterov momentum step on every parameter holding a gradient:
 *   v <- mu v - lr g
 *   w <- w + mu v - lr g
 * Gradients are cleared afterwards. Parameters without a gradient are left
 * alone; throws ContractError if none has one.
 */
void nag_step(std::span<Tensor> params, OptimizerState& opt);
void nag_step(Network& net, OptimizerState& opt);

/// Rescales the gradients of `params` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before rescaling. max_norm 0 disables it.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

// ---- stages ---------------------------------------------------------------

struct LrPhase {
  double learning_rate = 0.1;
  std::size_t epochs = 0;
};

struct StageConfig {
  std::vector<LrPhase> lr_schedule;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  // Verification stages: triplets drawn per epoch; 0 means one per training sample.
  std::size_t triplets_per_epoch = 0;
  double clip_norm = 0.0;  // 0: no clipping

  std::size_t epochs() const;
  void validate() const;
};

/// Schedule knobs shared by every stage of an experiment.
struct TrainingConfig {
  double scratch_lr = 0.1;
  double continuation_lr = 0.01;
  std::size_t epochs_per_phase = 15;
  double momentum = 0.9;
  std::size_t batch_cls = 64;
  std::size_t batch_ali = 32;
  std::size_t batch_ver = 32;
  // Triplets drawn per epoch; 0 means one per training sample.
  std::size_t triplets_per_epoch = 0;
  // Gradient-norm ceiling per step; 0 disables clipping.
  double clip_norm = 1.0;

  /// Networks trained from scratch run scratch_lr then continuation_lr;
  /// initialized networks run continuation_lr only.
  StageConfig stage(bool initialized, std::size_t batch_size, std::uint64_t seed) const;
  void validate() const;
};

enum class InitMode { Scratch, Pretrain, Distill };
enum class Task { Alignment, Verification };

std::string to_string(InitMode mode);
InitMode parse_init_mode(const std::string& text);
std::string to_string(Task task);

/// Per-step training losses, for diagnostics and trend checks.
struct TrainLog {
  std::vector<double> losses;
};

/// Builds from `spec` with the stage seed, fits the input normalizer on the
/// training split and trains on the softmax loss.
Network train_teacher_cls(const NetworkSpec& spec, const SplitDataset& data,
                          const StageConfig& stage, TrainLog* log = nullptr);

/// Same objective for a width-divided student: the full initialization W_S0.
Network init_student_cls(const NetworkSpec& student_spec, const SplitDataset& data,
                         const StageConfig& stage, TrainLog* log = nullptr);

/**
 * Classification distillation against a teacher whose logits are computed
 * online per batch. Scratch builds a fresh student from `student_spec`;
 * Pretrain continues from a value-copy of `full_init` (W_S0).
 */
Network distill_student_cls(const Network& teacher, InitMode mode, const NetworkSpec& student_spec,
                            const Network* full_init, const SplitDataset& data,
                            const DistillConfig& cfg, const StageConfig& stage,
                            TrainLog* log = nullptr);

/// Copies the classification teacher and fine-tunes it on the task loss
/// (keypoint regression, or triplets with an optional softmax term).
Network train_teacher_task(const Network& teacher_cls, Task task, const SplitDataset& data,
                           const DistillConfig& cfg, const StageConfig& stage,
                           bool include_softmax = false, TrainLog* log = nullptr);

/// A fresh student trained on the task objective alone; the Pretrain source.
Network pretrain_student_task(const NetworkSpec& student_spec, Task task, const SplitDataset& data,
                              const DistillConfig& cfg, const StageConfig& stage,
                              bool include_softmax = false, TrainLog* log = nullptr);

/**
 * Task distillation. `source` is the Pretrain network (task-trained from
 * scratch) or the Distill network (W_S^cls); it is value-copied before
 * training, then the copy is trained on the alignment or verification
 * distillation loss with cfg's alpha and beta.
 */
Network distill_student_task(const Network& teacher_task, const Network& source, InitMode mode,
                             Task task, const SplitDataset& data, const DistillConfig& cfg,
                             const StageConfig& stage, bool include_softmax = false,
                             TrainLog* log = nullptr);

// ---- evaluation -----------------------------------------------------------

struct Evaluation {
  double top1 = 0.0;
  double nrmse = 0.0;
  double verif_top1 = 0.0;
  double pair_acc = 0.0;
};

/// All four measures on the test split.
Evaluation evaluate(const Network& net, const SplitDataset& data, std::size_t pair_count = 300,
                    std::uint64_t pair_seed = 0);

// ---- target selection -----------------------------------------------------

struct TargetChoice {
  double alpha = 0.0;
  double beta = 0.0;
  bool operator==(const TargetChoice&) const = default;
};

/// Keeps a target iff its solo run, (1,0) for soft predictions or (0,1) for
/// the hidden layer, strictly improves on (0,0). Throws ContractError if any
/// of the three configurations is missing.
TargetChoice select_targets(const std::map<std::pair<double, double>, double>& metric,
                            bool higher_is_better);

// ---- experiments ----------------------------------------------------------

struct ExperimentPlan {
  GeneratorParams generator;
  NetworkSpec teacher;  // input/class/keypoint sizes follow the generator
  std::vector<std::size_t> divisors{2, 4, 8};
  TrainingConfig training;
  DistillConfig distill;  // tau, lambda and the classification alpha
  std::vector<std::pair<double, double>> task_grid{{0.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
  std::vector<InitMode> task_inits{InitMode::Pretrain, InitMode::Distill};
  bool run_alignment = true;
  bool run_verification = true;
  std::vector<bool> verification_softmax{false, true};
  std::size_t pair_count = 300;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::size_t threads = 1;

  void validate() const;
};

struct TargetSelection {
  std::string network;  // task-qualified network name
  std::string init;
  TargetChoice choice;
};

struct ExperimentResult {
  MetricsReport report;
  std::vector<TargetSelection> selections;

  std::string selections_text() const;
  std::string selections_json() const;
};

/// Task-qualified row names, e.g. "cls:teacher", "ali:student/8".
std::string network_name(const std::string& task_prefix, std::size_t divisor);

/**
 * Teacher cls -> student init -> student cls distillation -> per-task
 * teachers -> per-task student grid, evaluated on the test split. Stage
 * failures are rethrown as std::runtime_error naming the stage.
 */
ExperimentResult run_experiment(const ExperimentPlan& plan);

}  // namespace distillforge
