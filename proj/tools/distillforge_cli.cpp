// distillforge command-line entry point.
//
//   distillforge generate  [--config F] [--set k=v]... [--seed N] [--out DIR]
//   distillforge train     --stage NAME [stage options] [common options]
//   distillforge evaluate  --checkpoint F [--data F] [common options]
//   distillforge reproduce --plan default [common options]
//
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <thread>

#include "distillforge/config.hpp"
#include "distillforge/errors.hpp"
#include "distillforge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace distillforge;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "flat section.key = value file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", args.overrides, "key=value override (repeatable)")->take_all();
  cmd->add_option("--seed", args.seed, "top-level seed");
  cmd->add_option("--out", args.out, "output directory");
}

RunConfig resolve(const CommonArgs& args) {
  ConfigBuilder builder;
  if (!args.config_path.empty()) builder.apply_file(args.config_path);
  for (const auto& o : args.overrides) builder.apply_override(o);
  if (args.seed) builder.set_seed(*args.seed);
  RunConfig cfg = builder.build();
  if (!args.out.empty()) cfg.out_dir = args.out;

  std::size_t threads = builder.was_set("plan.threads")
                            ? cfg.plan.threads
                            : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DISTILLFORGE_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0) {
      throw UsageError("DISTILLFORGE_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    threads = std::min<std::size_t>(threads, cap);
  }
  cfg.plan.threads = threads;
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

SplitDataset dataset_for(const RunConfig& cfg, const std::string& data_path) {
  if (data_path.empty()) return generate(cfg.plan.generator);
  if (!fs::exists(data_path)) throw std::runtime_error("dataset file not found: " + data_path);
  try {
    return load_dataset(data_path);
  } catch (const ParseError& e) {
    throw std::runtime_error(data_path + ": " + e.what());
  }
}

Network checkpoint(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const ParseError& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

nlohmann::json metrics_json(const Evaluation& ev) {
  auto value = [](double v) -> nlohmann::json {
    if (std::isnan(v)) return nullptr;
    return v;
  };
  return {{"top1", value(ev.top1)},
          {"nrmse", value(ev.nrmse)},
          {"verif_top1", value(ev.verif_top1)},
          {"pair_acc", value(ev.pair_acc)}};
}

Evaluation evaluate_with(const RunConfig& cfg, const Network& net, const SplitDataset& data) {
  return evaluate(net, data, cfg.plan.pair_count, derive_seed(cfg.seed, "pairs"));
}

NetworkSpec teacher_spec(const RunConfig& cfg, const SplitDataset& data) {
  NetworkSpec spec = cfg.plan.teacher;
  spec.input_dim = data.input_dim();
  spec.num_classes = std::max(cfg.plan.generator.num_identities, data.num_identities());
  spec.num_keypoint_coords = data.num_keypoint_coords();
  spec.width_divisor = 1;
  return spec;
}

struct TaskChoice {
  Task task;
  bool joint;
  std::size_t batch;
};

TaskChoice task_of(const std::string& name, const TrainingConfig& tc) {
  if (name == "ali") return {Task::Alignment, false, tc.batch_ali};
  if (name == "ver") return {Task::Verification, false, tc.batch_ver};
  if (name == "verj") return {Task::Verification, true, tc.batch_ver};
  throw UsageError("--task must be ali, ver or verj");
}

// ---- subcommands ----------------------------------------------------------

int cmd_generate(const CommonArgs& args) {
  const RunConfig cfg = resolve(args);
  const auto data = generate(cfg.plan.generator);
  fs::create_directories(cfg.out_dir);
  const fs::path path = cfg.out_dir / "dataset.txt";
  save_dataset(data, path);
  std::cout << "wrote " << path.string() << " (" << data.train.size() << " train, "
            << data.test.size() << " test)\n";
  return 0;
}

struct TrainArgs {
  std::string stage;
  std::string data;
  std::string teacher;
  std::string source;
  std::string init = "Scratch";
  std::string task = "ali";
  std::size_t divisor = 8;
};

int cmd_train(const CommonArgs& args, const TrainArgs& t) {
  const RunConfig cfg = resolve(args);
  const auto data = dataset_for(cfg, t.data);
  const auto& tc = cfg.plan.training;
  const NetworkSpec tspec = teacher_spec(cfg, data);
  const NetworkSpec sspec = tspec.with_divisor(t.divisor);
  const std::string d = "/" + std::to_string(t.divisor);
  auto seed_for = [&](const std::string& name) { return derive_seed(cfg.seed, name); };

  std::optional<Network> net;
  std::string key;
  if (t.stage == "teacher-cls") {
    key = "teacher-cls";
    net = train_teacher_cls(tspec, data, tc.stage(false, tc.batch_cls, seed_for(key)));
  } else if (t.stage == "student-init") {
    key = "student-init" + d;
    net = init_student_cls(sspec, data, tc.stage(false, tc.batch_cls, seed_for(key)));
  } else if (t.stage == "student-cls") {
    const auto mode = parse_init_mode(t.init);
    const Network teacher = checkpoint(t.teacher, "teacher");
    std::optional<Network> full;
    if (mode == InitMode::Pretrain) full = checkpoint(t.source, "source");
    key = (mode == InitMode::Scratch ? "student-cls-scratch" : "student-cls-full") + d;
    net = distill_student_cls(teacher, mode, sspec, full ? &*full : nullptr, data, cfg.plan.distill,
                              tc.stage(mode != InitMode::Scratch, tc.batch_cls, seed_for(key)));
  } else if (t.stage == "teacher-task") {
    const auto task = task_of(t.task, tc);
    const Network teacher = checkpoint(t.teacher, "teacher");
    key = "teacher-" + t.task;
    net = train_teacher_task(teacher, task.task, data, cfg.plan.distill,
                             tc.stage(true, task.batch, seed_for(key)), task.joint);
  } else if (t.stage == "student-pretrain") {
    const auto task = task_of(t.task, tc);
    key = "student-pretrain-" + t.task + d;
    net = pretrain_student_task(sspec, task.task, data, cfg.plan.distill,
                                tc.stage(false, task.batch, seed_for(key)), task.joint);
  } else if (t.stage == "student-task") {
    const auto task = task_of(t.task, tc);
    const auto mode = parse_init_mode(t.init);
    const Network teacher = checkpoint(t.teacher, "teacher");
    const Network source = checkpoint(t.source, "source");
    key = "student-" + t.task + "-" + to_string(mode) + d;
    net = distill_student_task(teacher, source, mode, task.task, data, cfg.plan.distill,
                               tc.stage(true, task.batch, seed_for(key)), task.joint);
  } else {
    throw UsageError("unknown stage '" + t.stage +
                     "' (teacher-cls, student-init, student-cls, teacher-task, "
                     "student-pretrain, student-task)");
  }

  std::string file = key;
  for (char& c : file) {
    if (c == '/') c = '-';
  }
  fs::create_directories(cfg.out_dir);
  const fs::path ckpt = cfg.out_dir / (file + ".ckpt");
  save_checkpoint(*net, ckpt);
  const auto metrics = metrics_json(evaluate_with(cfg, *net, data));
  const nlohmann::json doc = {{"stage", key}, {"checkpoint", ckpt.string()}, {"metrics", metrics}};
  write_file(cfg.out_dir / (file + ".metrics.json"), doc.dump(2) + "\n");
  std::cout << doc.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::vector<std::string>& checkpoints,
                 const std::string& data_path) {
  const RunConfig cfg = resolve(args);
  const auto data = dataset_for(cfg, data_path);
  nlohmann::json all = nlohmann::json::array();
  for (const auto& path : checkpoints) {
    const Network net = checkpoint(path, "checkpoint");
    all.push_back({{"checkpoint", path}, {"metrics", metrics_json(evaluate_with(cfg, net, data))}});
  }
  const std::string text = (all.size() == 1 ? all.front() : all).dump(2) + "\n";
  if (!args.out.empty()) {
    fs::create_directories(cfg.out_dir);
    write_file(cfg.out_dir / "evaluation.json", text);
  }
  std::cout << text;
  return 0;
}

int cmd_reproduce(const CommonArgs& args, const std::string& plan_name) {
  if (plan_name != "default") throw UsageError("unknown plan '" + plan_name + "' (only 'default')");
  RunConfig cfg = resolve(args);
  fs::create_directories(cfg.out_dir);
  cfg.plan.checkpoint_dir = cfg.out_dir / "checkpoints";
  write_file(cfg.out_dir / "config.txt", render_config(cfg));

  const ExperimentResult result = run_experiment(cfg.plan);
  write_file(cfg.out_dir / "report.txt", result.report.to_text());
  write_file(cfg.out_dir / "report.json", result.report.to_json());
  write_file(cfg.out_dir / "selections.txt", result.selections_text());
  write_file(cfg.out_dir / "selections.json", result.selections_json());
  std::cout << result.report.to_text() << "\nselected targets:\n" << result.selections_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distillforge: teacher-student distillation experiments on synthetic faces"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, repro_args;
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen, gen_args);

  TrainArgs t;
  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, train_args);
  train->add_option("--stage", t.stage, "stage name")->required();
  train->add_option("--data", t.data, "dataset file (default: generated from the config)");
  train->add_option("--teacher", t.teacher, "teacher checkpoint");
  train->add_option("--source", t.source, "initialization checkpoint");
  train->add_option("--init", t.init, "Scratch, Pretrain or Distill");
  train->add_option("--task", t.task, "ali, ver or verj");
  train->add_option("--divisor", t.divisor, "student width divisor")->check(CLI::PositiveNumber);

  std::vector<std::string> eval_ckpts;
  std::string eval_data;
  auto* eval = app.add_subcommand("evaluate", "evaluate checkpoints on the test split");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpts, "checkpoint file (repeatable)")->required();
  eval->add_option("--data", eval_data, "dataset file (default: generated from the config)");

  std::string plan_name = "default";
  auto* repro = app.add_subcommand("reproduce", "run the full experiment plan");
  add_common(repro, repro_args);
  repro->add_option("--plan", plan_name, "plan name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_generate(gen_args);
    if (*train) return cmd_train(train_args, t);
    if (*eval) return cmd_evaluate(eval_args, eval_ckpts, eval_data);
    if (*repro) return cmd_reproduce(repro_args, plan_name);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
