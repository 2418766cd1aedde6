#include "distillforge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <optional>
#include <stdexcept>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "distillforge/errors.hpp"
#include "distillforge/random.hpp"

namespace distillforge {

namespace {

// Loss of one minibatch; `rows` index the items of the current epoch.
using BatchLoss = std::function<Tensor(std::size_t epoch, std::span<const std::size_t> rows)>;

void run_stage(Network& net, const StageConfig& stage, std::size_t items_per_epoch,
               const BatchLoss& batch_loss, TrainLog* log) {
  stage.validate();
  OptimizerState opt;
  opt.momentum = stage.momentum;
  Rng rng(derive_seed(stage.seed, "batches"));
  std::vector<std::size_t> order(items_per_epoch);
  std::size_t epoch = 0;
  for (const auto& phase : stage.lr_schedule) {
    opt.learning_rate = phase.learning_rate;
    for (std::size_t e = 0; e < phase.epochs; ++e, ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += stage.batch_size) {
        const std::size_t end = std::min(order.size(), start + stage.batch_size);
        const std::span<const std::size_t> rows(order.data() + start, end - start);
        Tensor loss = batch_loss(epoch, rows);
        if (!std::isfinite(loss.item())) {
          throw EvaluationError("training loss became non-finite at epoch " +
                                std::to_string(epoch));
        }
        if (log) log->losses.push_back(loss.item());
        backward(loss);
        clip_grad_norm(net.parameters(), stage.clip_norm);
        nag_step(net, opt);
      }
    }
  }
}

std::vector<std::size_t> pick(std::span<const std::size_t> all, std::span<const std::size_t> rows) {
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(all[r]);
  return out;
}

Network fresh_network(const NetworkSpec& spec, const SplitDataset& data, std::uint64_t seed) {
  Network net = Network::build(spec, derive_seed(seed, "init"));
  net.set_normalizer(InputNormalizer::fit(features_matrix(data.train)));
  return net;
}

void check_data(const NetworkSpec& spec, const SplitDataset& data) {
  if (data.train.empty()) throw DataError("training split is empty");
  if (data.input_dim() != spec.input_dim) {
    throw ContractError("dataset has " + std::to_string(data.input_dim()) +
                        " features, network expects " + std::to_string(spec.input_dim));
  }
  if (data.num_identities() > spec.num_classes) {
    throw ContractError("dataset has more identities than the network has classes");
  }
}

void train_softmax(Network& net, const SplitDataset& data, const StageConfig& stage,
                   TrainLog* log) {
  check_data(net.spec(), data);
  const auto labels = identities_of(data.train);
  run_stage(net, stage, data.train.size(),
            [&](std::size_t, std::span<const std::size_t> rows) {
              const auto out = net.forward(features_matrix(data.train, rows));
              const auto batch_labels = pick(labels, rows);
              return softmax_loss(out.logits, batch_labels);
            },
            log);
}

// Distinct samples of a triplet batch plus each member's row among them.
struct TripletBatch {
  std::vector<std::size_t> samples;
  TripletRows rows;
};

TripletBatch gather_triplets(const std::vector<Triplet>& triplets,
                             std::span<const std::size_t> which) {
  TripletBatch batch;
  std::map<std::size_t, std::size_t> slot;
  auto row_of = [&](std::size_t sample) {
    auto [it, inserted] = slot.try_emplace(sample, batch.samples.size());
    if (inserted) batch.samples.push_back(sample);
    return it->second;
  };
  for (auto t : which) {
    batch.rows.anchor.push_back(row_of(triplets[t].anchor));
    batch.rows.positive.push_back(row_of(triplets[t].positive));
    batch.rows.negative.push_back(row_of(triplets[t].negative));
  }
  return batch;
}

void require_task_data(const Network& net, Task task, const SplitDataset& data) {
  check_data(net.spec(), data);
  if (task == Task::Alignment) {
    if (data.num_keypoint_coords() == 0 ||
        data.num_keypoint_coords() != net.spec().num_keypoint_coords) {
      throw ContractError("alignment needs keypoints matching the regression head (" +
                          std::to_string(net.spec().num_keypoint_coords) + " coords, data has " +
                          std::to_string(data.num_keypoint_coords()) + ")");
    }
  }
}

/// Trains `student` on the task loss, distilling from `teacher` when given.
void train_task(Network& student, const Network* teacher, Task task, const SplitDataset& data,
                const DistillConfig& cfg, const StageConfig& stage, bool include_softmax,
                TrainLog* log) {
  require_task_data(student, task, data);
  DistillConfig effective = cfg;
  if (!teacher) effective.alpha = effective.beta = 0.0;

  if (task == Task::Alignment) {
    run_stage(student, stage, data.train.size(),
              [&](std::size_t, std::span<const std::size_t> rows) {
                const Tensor x = features_matrix(data.train, rows);
                const Tensor y = keypoints_matrix(data.train, rows);
                const auto out = student.forward(x);
                const auto target = teacher ? teacher->infer(x) : out;
                return align_distill_loss(out, target, y, effective);
              },
              log);
    return;
  }

  const auto labels = identities_of(data.train);
  const std::size_t count =
      stage.triplets_per_epoch ? stage.triplets_per_epoch : data.train.size();
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<Triplet> triplets;
  run_stage(student, stage, count,
            [&](std::size_t epoch, std::span<const std::size_t> rows) {
              if (epoch != cached_epoch) {
                const auto seed = derive_seed(stage.seed, "triplets/" + std::to_string(epoch));
                triplets = make_triplets(labels, count, seed);
                cached_epoch = epoch;
              }
              const auto batch = gather_triplets(triplets, rows);
              const Tensor x = features_matrix(data.train, batch.samples);
              const auto out = student.forward(x);
              const auto target = teacher ? teacher->infer(x) : out;
              const auto batch_labels = pick(labels, batch.samples);
              return verif_distill_loss(out, target, batch.rows, effective, include_softmax,
                                        std::span<const std::size_t>(batch_labels));
            },
            log);
}

}  // namespace

// ---- optimizer ------------------------------------------------------------

void OptimizerState::validate() const {
  if (!(learning_rate >= 0.0)) throw ParameterError("learning rate must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must be in [0, 1)");
}

void nag_step(std::span<Tensor> params, OptimizerState& opt) {
  opt.validate();
  if (opt.velocity.size() != params.size()) opt.velocity.resize(params.size());
  bool any = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    any = true;
    auto& v = opt.velocity[i];
    if (v.size() != p.numel()) v.assign(p.numel(), 0.0);
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = opt.momentum * v[j] - opt.learning_rate * g[j];
      w[j] += opt.momentum * v[j] - opt.learning_rate * g[j];
    }
    p.clear_grad();
  }
  if (!any) throw ContractError("nag_step: no parameter holds a gradient; run backward first");
}

void nag_step(Network& net, OptimizerState& opt) { nag_step(net.parameters(), opt); }

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  if (!(max_norm >= 0.0)) throw ParameterError("clip_grad_norm: max_norm must be nonnegative");
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm == 0.0 || norm <= max_norm) return norm;
  const double shrink = max_norm / norm - 1.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    std::vector<double> delta(p.grad().begin(), p.grad().end());
    for (auto& d : delta) d *= shrink;
    p.accumulate_grad(delta);
  }
  return norm;
}

// ---- stage configuration --------------------------------------------------

std::size_t StageConfig::epochs() const {
  std::size_t n = 0;
  for (const auto& p : lr_schedule) n += p.epochs;
  return n;
}

void StageConfig::validate() const {
  if (lr_schedule.empty()) throw ParameterError("stage: learning-rate schedule is empty");
  for (const auto& p : lr_schedule) {
    if (!(p.learning_rate > 0.0)) throw ParameterError("stage: learning rates must be positive");
  }
  if (batch_size == 0) throw ParameterError("stage: batch size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("stage: momentum must be in [0, 1)");
  if (!(clip_norm >= 0.0)) throw ParameterError("stage: clip_norm must be nonnegative");
}

StageConfig TrainingConfig::stage(bool initialized, std::size_t batch_size,
                                  std::uint64_t seed) const {
  StageConfig s;
  if (!initialized) s.lr_schedule.push_back({scratch_lr, epochs_per_phase});
  s.lr_schedule.push_back({continuation_lr, epochs_per_phase});
  s.batch_size = batch_size;
  s.momentum = momentum;
  s.seed = seed;
  s.triplets_per_epoch = triplets_per_epoch;
  s.clip_norm = clip_norm;
  return s;
}

void TrainingConfig::validate() const {
  if (!(scratch_lr > 0.0)) throw ParameterError("train.scratch_lr must be positive");
  if (!(continuation_lr > 0.0)) throw ParameterError("train.continuation_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("train.momentum must be in [0, 1)");
  if (batch_cls == 0 || batch_ali == 0 || batch_ver == 0) {
    throw ParameterError("train batch sizes must be positive");
  }
  if (!(clip_norm >= 0.0)) throw ParameterError("train.clip_norm must be nonnegative");
}

std::string to_string(InitMode mode) {
  switch (mode) {
    case InitMode::Scratch: return "Scratch";
    case InitMode::Pretrain: return "Pretrain";
    case InitMode::Distill: return "Distill";
  }
  return "?";
}

InitMode parse_init_mode(const std::string& text) {
  if (text == "Scratch" || text == "scratch") return InitMode::Scratch;
  if (text == "Pretrain" || text == "pretrain") return InitMode::Pretrain;
  if (text == "Distill" || text == "distill") return InitMode::Distill;
  throw ParameterError("unknown initialization mode '" + text + "'");
}

std::string to_string(Task task) { return task == Task::Alignment ? "alignment" : "verification"; }

// ---- stages ---------------------------------------------------------------

Network train_teacher_cls(const NetworkSpec& spec, const SplitDataset& data,
                          const StageConfig& stage, TrainLog* log) {
  spec.validate();
  check_data(spec, data);
  Network net = fresh_network(spec, data, stage.seed);
  train_softmax(net, data, stage, log);
  return net;
}

Network init_student_cls(const NetworkSpec& student_spec, const SplitDataset& data,
                         const StageConfig& stage, TrainLog* log) {
  return train_teacher_cls(student_spec, data, stage, log);
}

Network distill_student_cls(const Network& teacher, InitMode mode, const NetworkSpec& student_spec,
                            const Network* full_init, const SplitDataset& data,
                            const DistillConfig& cfg, const StageConfig& stage, TrainLog* log) {
  cfg.validate();
  student_spec.validate();
  check_data(student_spec, data);
  if (teacher.spec().num_classes != student_spec.num_classes) {
    throw ContractError("teacher and student disagree on the number of classes");
  }
  std::optional<Network> student;
  switch (mode) {
    case InitMode::Scratch:
      student = fresh_network(student_spec, data, stage.seed);
      break;
    case InitMode::Pretrain:
      if (!full_init) throw ContractError("full initialization requested without a source network");
      if (!(full_init->spec() == student_spec)) {
        throw ContractError("full-initialization source has spec " + to_string(full_init->spec()) +
                            ", expected " + to_string(student_spec));
      }
      student = full_init->clone();
      break;
    case InitMode::Distill:
      throw ContractError("classification distillation starts from Scratch or Pretrain");
  }
  Network& net = *student;
  const auto labels = identities_of(data.train);
  run_stage(net, stage, data.train.size(),
            [&](std::size_t, std::span<const std::size_t> rows) {
              const Tensor x = features_matrix(data.train, rows);
              const auto out = net.forward(x);
              const auto batch_labels = pick(labels, rows);
              if (cfg.alpha == 0.0) return softmax_loss(out.logits, batch_labels);
              return distill_cls_loss(out.logits, teacher.infer(x).logits, batch_labels, cfg);
            },
            log);
  return std::move(net);
}

Network train_teacher_task(const Network& teacher_cls, Task task, const SplitDataset& data,
                           const DistillConfig& cfg, const StageConfig& stage,
                           bool include_softmax, TrainLog* log) {
  cfg.validate();
  Network net = teacher_cls.clone();
  train_task(net, nullptr, task, data, cfg, stage, include_softmax, log);
  return net;
}

Network pretrain_student_task(const NetworkSpec& student_spec, Task task, const SplitDataset& data,
                              const DistillConfig& cfg, const StageConfig& stage,
                              bool include_softmax, TrainLog* log) {
  cfg.validate();
  student_spec.validate();
  check_data(student_spec, data);
  Network net = fresh_network(student_spec, data, stage.seed);
  train_task(net, nullptr, task, data, cfg, stage, include_softmax, log);
  return net;
}

Network distill_student_task(const Network& teacher_task, const Network& source, InitMode mode,
                             Task task, const SplitDataset& data, const DistillConfig& cfg,
                             const StageConfig& stage, bool include_softmax, TrainLog* log) {
  cfg.validate();
  if (mode == InitMode::Scratch) {
    throw ContractError("task distillation starts from a Pretrain or Distill source");
  }
  const auto& ts = teacher_task.spec();
  const auto& ss = source.spec();
  if (ts.input_dim != ss.input_dim || ts.num_classes != ss.num_classes ||
      ts.num_keypoint_coords != ss.num_keypoint_coords) {
    throw ContractError("teacher and student heads differ: " + to_string(ts) + " vs " +
                        to_string(ss));
  }
  if (cfg.beta != 0.0 && ts.embedding_dim != ss.embedding_dim) {
    throw ContractError("hidden-layer matching needs equal embedding widths");
  }
  Network net = source.clone();
  train_task(net, &teacher_task, task, data, cfg, stage, include_softmax, log);
  return net;
}

// ---- evaluation -----------------------------------------------------------

Evaluation evaluate(const Network& net, const SplitDataset& data, std::size_t pair_count,
                    std::uint64_t pair_seed) {
  if (data.test.empty()) throw DataError("test split is empty");
  if (data.input_dim() != net.spec().input_dim) {
    throw ContractError("dataset has " + std::to_string(data.input_dim()) +
                        " features, network expects " + std::to_string(net.spec().input_dim));
  }
  const auto out = net.infer(features_matrix(data.test));
  const auto ids = identities_of(data.test);
  Evaluation ev;
  ev.top1 = top1_accuracy(out.logits, ids);
  ev.nrmse = std::numeric_limits<double>::quiet_NaN();
  if (data.num_keypoint_coords() >= 4 &&
      data.num_keypoint_coords() == net.spec().num_keypoint_coords) {
    const Tensor truth = keypoints_matrix(data.test);
    const auto norm = interocular_distances(truth, mean_interocular_distance(truth));
    ev.nrmse = nrmse(out.regression, truth, norm);
  }
  ev.verif_top1 = data.test.size() >= 2 ? verification_top1(out.embedding, ids)
                                        : std::numeric_limits<double>::quiet_NaN();
  const auto [same, diff] = sample_pairs(ids, pair_count, pair_seed);
  ev.pair_acc = (same.empty() && diff.empty())
                    ? std::numeric_limits<double>::quiet_NaN()
                    : pair_verification_accuracy(out.embedding, same, diff);
  return ev;
}

// ---- target selection -----------------------------------------------------

TargetChoice select_targets(const std::map<std::pair<double, double>, double>& metric,
                            bool higher_is_better) {
  auto get = [&](double a, double b) {
    auto it = metric.find({a, b});
    if (it == metric.end()) {
      std::ostringstream msg;
      msg << "select_targets: configuration (" << a << ", " << b << ") was not evaluated";
      throw ContractError(msg.str());
    }
    return it->second;
  };
  const double base = get(0.0, 0.0);
  const double soft = get(1.0, 0.0);
  const double hidden = get(0.0, 1.0);
  auto better = [&](double v) { return higher_is_better ? v > base : v < base; };
  return {better(soft) ? 1.0 : 0.0, better(hidden) ? 1.0 : 0.0};
}

// ---- experiments ----------------------------------------------------------

void ExperimentPlan::validate() const {
  generator.validate();
  training.validate();
  distill.validate();
  for (auto d : divisors) {
    if (d == 0) throw ParameterError("plan.divisors must be positive");
  }
  for (std::size_t i = 0; i < task_grid.size(); ++i) {
    const auto [a, b] = task_grid[i];
    if (!(std::isfinite(a) && a >= 0.0 && std::isfinite(b) && b >= 0.0)) {
      throw ParameterError("plan.task_grid weights must be finite and nonnegative");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (task_grid[j] == task_grid[i]) throw ParameterError("plan.task_grid has a duplicate entry");
    }
  }
  for (auto m : task_inits) {
    if (m == InitMode::Scratch) throw ParameterError("plan.task_inits accepts Pretrain and Distill");
  }
  if (pair_count == 0) throw ParameterError("plan.pair_count must be positive");
  if (threads == 0) throw ParameterError("plan.threads must be positive");
}

std::string network_name(const std::string& task_prefix, std::size_t divisor) {
  return task_prefix + ":" + (divisor == 0 ? std::string("teacher") : "student/" + std::to_string(divisor));
}

std::string ExperimentResult::selections_text() const {
  std::ostringstream out;
  for (const auto& s : selections) {
    out << s.network << ' ' << s.init << " alpha=" << s.choice.alpha << " beta=" << s.choice.beta
        << '\n';
  }
  return out.str();
}

std::string ExperimentResult::selections_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : selections) {
    arr.push_back({{"network", s.network},
                   {"init", s.init},
                   {"alpha", s.choice.alpha},
                   {"beta", s.choice.beta}});
  }
  return arr.dump(2) + "\n";
}

namespace {

struct TaskVariant {
  std::string prefix;
  Task task;
  bool include_softmax;
};

struct PendingRow {
  ReportKey key;
  std::map<std::string, double> metrics;
};

template <class F>
auto staged(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw std::runtime_error("stage '" + name + "' failed: " + e.what());
  }
}

std::string run_key(const ReportKey& key) {
  std::ostringstream out;
  for (char c : key.network) out << (c == ':' || c == '/' ? '-' : c);
  out << '_' << key.init << "_a" << key.alpha << "_b" << key.beta;
  return out.str();
}

std::map<std::string, double> metrics_for(const std::string& prefix, const Evaluation& ev) {
  if (prefix == "cls") return {{"top1", ev.top1}, {"pair_acc", ev.pair_acc}};
  if (prefix == "ali") return {{"nrmse", ev.nrmse}};
  return {{"verif_top1", ev.verif_top1}, {"pair_acc", ev.pair_acc}};
}

class Recorder {
 public:
  Recorder(const ExperimentPlan& plan, const SplitDataset& data)
      : plan_(plan), data_(data), pair_seed_(derive_seed(plan.seed, "pairs")) {}

  Evaluation record(std::vector<PendingRow>& rows, const std::string& prefix, ReportKey key,
                    const Network& net) const {
    const Evaluation ev = evaluate(net, data_, plan_.pair_count, pair_seed_);
    if (!plan_.checkpoint_dir.empty()) save_checkpoint(net, plan_.checkpoint_dir / (run_key(key) + ".ckpt"));
    rows.push_back({std::move(key), metrics_for(prefix, ev)});
    return ev;
  }

 private:
  const ExperimentPlan& plan_;
  const SplitDataset& data_;
  std::uint64_t pair_seed_;
};

struct DivisorOutcome {
  std::vector<PendingRow> rows;
  std::vector<TargetSelection> selections;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const auto data = staged("generate", [&] { return generate(plan.generator); });

  NetworkSpec tspec = plan.teacher;
  tspec.input_dim = plan.generator.input_dim;
  tspec.num_classes = plan.generator.num_identities;
  tspec.num_keypoint_coords = plan.generator.num_keypoint_coords();
  tspec.width_divisor = 1;
  tspec.validate();
  if (!plan.checkpoint_dir.empty()) std::filesystem::create_directories(plan.checkpoint_dir);

  const auto& tc = plan.training;
  const auto seed_for = [&](const std::string& name) { return derive_seed(plan.seed, name); };
  const Recorder recorder(plan, data);
  std::vector<PendingRow> head;

  const Network teacher_cls = staged("teacher-cls", [&] {
    return train_teacher_cls(tspec, data, tc.stage(false, tc.batch_cls, seed_for("teacher-cls")));
  });
  recorder.record(head, "cls", {network_name("cls", 0), to_string(InitMode::Scratch), 0.0, 0.0},
                  teacher_cls);

  std::vector<TaskVariant> variants;
  if (plan.run_alignment) variants.push_back({"ali", Task::Alignment, false});
  if (plan.run_verification) {
    for (bool joint : plan.verification_softmax) {
      variants.push_back({joint ? "verj" : "ver", Task::Verification, joint});
    }
  }

  std::vector<Network> task_teachers;
  for (const auto& v : variants) {
    const std::string name = "teacher-" + v.prefix;
    const std::size_t batch = v.task == Task::Alignment ? tc.batch_ali : tc.batch_ver;
    task_teachers.push_back(staged(name, [&] {
      return train_teacher_task(teacher_cls, v.task, data, plan.distill,
                                tc.stage(true, batch, seed_for(name)), v.include_softmax);
    }));
    recorder.record(head, v.prefix,
                    {network_name(v.prefix, 0), to_string(InitMode::Distill), 0.0, 0.0},
                    task_teachers.back());
  }

  auto run_divisor = [&](std::size_t d) {
    DivisorOutcome outcome;
    auto& rows = outcome.rows;
    const NetworkSpec sspec = tspec.with_divisor(d);
    const std::string tag = "/" + std::to_string(d);
    const std::string cls_name = network_name("cls", d);

    const Network init = staged("student-init" + tag, [&] {
      return init_student_cls(sspec, data, tc.stage(false, tc.batch_cls, seed_for("student-init" + tag)));
    });
    const Network scratch = staged("student-cls-scratch" + tag, [&] {
      return distill_student_cls(teacher_cls, InitMode::Scratch, sspec, nullptr, data, plan.distill,
                                 tc.stage(false, tc.batch_cls, seed_for("student-cls-scratch" + tag)));
    });
    recorder.record(rows, "cls", {cls_name, to_string(InitMode::Scratch), plan.distill.alpha, 0.0},
                    scratch);
    const Network full = staged("student-cls-full" + tag, [&] {
      return distill_student_cls(teacher_cls, InitMode::Pretrain, sspec, &init, data, plan.distill,
                                 tc.stage(true, tc.batch_cls, seed_for("student-cls-full" + tag)));
    });
    recorder.record(rows, "cls", {cls_name, to_string(InitMode::Pretrain), plan.distill.alpha, 0.0},
                    full);

    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
      const auto& v = variants[vi];
      const std::size_t batch = v.task == Task::Alignment ? tc.batch_ali : tc.batch_ver;
      const std::string name = network_name(v.prefix, d);
      std::optional<Network> pretrained;
      for (InitMode mode : plan.task_inits) {
        const Network* source = &full;
        if (mode == InitMode::Pretrain) {
          if (!pretrained) {
            const std::string stage_name = "student-pretrain-" + v.prefix + tag;
            pretrained = staged(stage_name, [&] {
              return pretrain_student_task(sspec, v.task, data, plan.distill,
                                           tc.stage(false, batch, seed_for(stage_name)),
                                           v.include_softmax);
            });
          }
          source = &*pretrained;
        }
        std::map<std::pair<double, double>, double> scores;
        for (const auto& [alpha, beta] : plan.task_grid) {
          DistillConfig cfg = plan.distill;
          cfg.alpha = alpha;
          cfg.beta = beta;
          ReportKey key{name, to_string(mode), alpha, beta};
          const std::string stage_name = "student-" + v.prefix + "-" + run_key(key);
          const Network student = staged(stage_name, [&] {
            return distill_student_task(task_teachers[vi], *source, mode, v.task, data, cfg,
                                        tc.stage(true, batch, seed_for(stage_name)),
                                        v.include_softmax);
          });
          const auto ev = recorder.record(rows, v.prefix, std::move(key), student);
          scores[{alpha, beta}] = v.task == Task::Alignment ? ev.nrmse : ev.verif_top1;
        }
        if (scores.contains({0.0, 0.0}) && scores.contains({1.0, 0.0}) &&
            scores.contains({0.0, 1.0})) {
          outcome.selections.push_back(
              {name, to_string(mode), select_targets(scores, v.task != Task::Alignment)});
        }
      }
    }
    return outcome;
  };

  std::vector<DivisorOutcome> outcomes(plan.divisors.size());
  std::vector<std::exception_ptr> errors(plan.divisors.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.divisors.size(); i = next++) {
      try {
        outcomes[i] = run_divisor(plan.divisors[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(plan.threads, plan.divisors.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ExperimentResult result;
  for (auto& r : head) result.report.add(std::move(r.key), std::move(r.metrics));
  for (auto& o : outcomes) {
    for (auto& r : o.rows) result.report.add(std::move(r.key), std::move(r.metrics));
    for (auto& s : o.selections) result.selections.push_back(std::move(s));
  }
  return result;
}

}  // namespace distillforge
