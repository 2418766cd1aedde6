#include "distillforge/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "distillforge/errors.hpp"
#include "distillforge/random.hpp"

namespace distillforge {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

std::uint64_t to_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ParameterError("expected a nonnegative integer, got '" + s + "'");
  }
  return v;
}

std::size_t to_count(const std::string& s) {
  const auto v = to_uint(s);
  if (v == 0) throw ParameterError("must be positive");
  return static_cast<std::size_t>(v);
}

double to_real(const std::string& s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ParameterError("expected a number, got '" + s + "'");
  }
  if (!std::isfinite(v)) throw ParameterError("must be finite");
  return v;
}

double nonneg(const std::string& s) {
  const double v = to_real(s);
  if (v < 0.0) throw ParameterError("must be nonnegative");
  return v;
}

double positive(const std::string& s) {
  const double v = to_real(s);
  if (!(v > 0.0)) throw ParameterError("must be positive");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ParameterError("expected true or false, got '" + s + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& show) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + show(items[i]);
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define COUNT_KEY(name, desc, field)                                              \
  Entry {                                                                         \
    {name, desc}, [](RunConfig& c, const std::string& v) { c.field = to_count(v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                \
  }
#define REAL_KEY(name, desc, field, check)                                     \
  Entry {                                                                      \
    {name, desc}, [](RunConfig& c, const std::string& v) { c.field = check(v); }, \
        [](const RunConfig& c) { return fmt(c.field); }                        \
  }
#define BOOL_KEY(name, desc, field)                                              \
  Entry {                                                                        \
    {name, desc}, [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }, \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{{"run.seed", "top-level seed; every stage derives its own stream from it"},
            [](RunConfig& c, const std::string& v) { c.seed = to_uint(v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      Entry{{"run.out", "output directory"},
            [](RunConfig& c, const std::string& v) {
              if (v.empty()) throw ParameterError("must not be empty");
              c.out_dir = v;
            },
            [](const RunConfig& c) { return c.out_dir.string(); }},

      COUNT_KEY("generator.num_identities", "identities (classes)", plan.generator.num_identities),
      COUNT_KEY("generator.samples_per_identity", "samples per identity before the split",
                plan.generator.samples_per_identity),
      COUNT_KEY("generator.input_dim", "feature dimension", plan.generator.input_dim),
      COUNT_KEY("generator.latent_dim", "identity latent dimension", plan.generator.latent_dim),
      COUNT_KEY("generator.pose_dim", "pose latent dimension", plan.generator.pose_dim),
      COUNT_KEY("generator.num_keypoints", "keypoints per sample (at least 2)",
                plan.generator.num_keypoints),
      REAL_KEY("generator.identity_keypoint_scale", "identity influence on keypoints",
               plan.generator.identity_keypoint_scale, nonneg),
      REAL_KEY("generator.pose_keypoint_scale", "pose influence on keypoints",
               plan.generator.pose_keypoint_scale, positive),
      REAL_KEY("generator.noise_std", "observation noise", plan.generator.noise_std, nonneg),

      Entry{{"teacher.hidden_widths", "teacher hidden layer widths, comma separated"},
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> widths;
              for (const auto& w : split_list(v)) widths.push_back(to_count(w));
              c.plan.teacher.hidden_widths = widths;
            },
            [](const RunConfig& c) {
              return join(c.plan.teacher.hidden_widths, [](std::size_t w) { return std::to_string(w); });
            }},
      COUNT_KEY("teacher.embedding_dim", "width of the embedding layer K",
                plan.teacher.embedding_dim),

      Entry{{"plan.divisors", "student width divisors, comma separated (may be empty)"},
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> ds;
              for (const auto& d : split_list(v)) ds.push_back(to_count(d));
              c.plan.divisors = ds;
            },
            [](const RunConfig& c) {
              return join(c.plan.divisors, [](std::size_t d) { return std::to_string(d); });
            }},
      Entry{{"plan.task_grid", "task (alpha:beta) cells, comma separated"},
            [](RunConfig& c, const std::string& v) {
              std::vector<std::pair<double, double>> grid;
              for (const auto& cell : split_list(v)) {
                const auto colon = cell.find(':');
                if (colon == std::string::npos) {
                  throw ParameterError("grid cell '" + cell + "' is not alpha:beta");
                }
                grid.emplace_back(nonneg(trim(cell.substr(0, colon))),
                                  nonneg(trim(cell.substr(colon + 1))));
              }
              c.plan.task_grid = grid;
            },
            [](const RunConfig& c) {
              return join(c.plan.task_grid, [](const std::pair<double, double>& g) {
                return fmt(g.first) + ":" + fmt(g.second);
              });
            }},
      Entry{{"plan.task_inits", "task initializations: Pretrain, Distill"},
            [](RunConfig& c, const std::string& v) {
              std::vector<InitMode> modes;
              for (const auto& m : split_list(v)) {
                const auto mode = parse_init_mode(m);
                if (mode == InitMode::Scratch) throw ParameterError("accepts Pretrain and Distill");
                modes.push_back(mode);
              }
              c.plan.task_inits = modes;
            },
            [](const RunConfig& c) {
              return join(c.plan.task_inits, [](InitMode m) { return to_string(m); });
            }},
      BOOL_KEY("plan.run_alignment", "run the alignment task", plan.run_alignment),
      BOOL_KEY("plan.run_verification", "run the verification task", plan.run_verification),
      Entry{{"plan.verification_softmax", "verification variants: false (triplet only), true (joint)"},
            [](RunConfig& c, const std::string& v) {
              std::vector<bool> flags;
              for (const auto& f : split_list(v)) flags.push_back(to_bool(f));
              c.plan.verification_softmax = flags;
            },
            [](const RunConfig& c) {
              return join(c.plan.verification_softmax,
                          [](bool b) { return std::string(b ? "true" : "false"); });
            }},
      COUNT_KEY("plan.pair_count", "same/different pairs drawn for pair accuracy",
                plan.pair_count),
      COUNT_KEY("plan.threads", "parallel student runs", plan.threads),

      REAL_KEY("train.scratch_lr", "first-phase rate for networks trained from scratch",
               plan.training.scratch_lr, positive),
      REAL_KEY("train.continuation_lr", "second-phase rate; the only phase when initialized",
               plan.training.continuation_lr, positive),
      Entry{{"train.epochs_per_phase", "epochs per learning-rate phase"},
            [](RunConfig& c, const std::string& v) { c.plan.training.epochs_per_phase = to_uint(v); },
            [](const RunConfig& c) { return std::to_string(c.plan.training.epochs_per_phase); }},
      Entry{{"train.momentum", "Nesterov momentum in [0, 1)"},
            [](RunConfig& c, const std::string& v) {
              const double m = to_real(v);
              if (!(m >= 0.0 && m < 1.0)) throw ParameterError("must be in [0, 1)");
              c.plan.training.momentum = m;
            },
            [](const RunConfig& c) { return fmt(c.plan.training.momentum); }},
      COUNT_KEY("train.batch_cls", "classification batch size", plan.training.batch_cls),
      COUNT_KEY("train.batch_ali", "alignment batch size", plan.training.batch_ali),
      COUNT_KEY("train.batch_ver", "verification batch size (triplets)", plan.training.batch_ver),
      Entry{{"train.triplets_per_epoch", "triplets per epoch; 0 means one per training sample"},
            [](RunConfig& c, const std::string& v) { c.plan.training.triplets_per_epoch = to_uint(v); },
            [](const RunConfig& c) { return std::to_string(c.plan.training.triplets_per_epoch); }},

      REAL_KEY("train.clip_norm", "gradient-norm ceiling per step; 0 disables clipping",
               plan.training.clip_norm, nonneg),

      REAL_KEY("distill.alpha", "soft-prediction weight for classification distillation",
               plan.distill.alpha, nonneg),
      REAL_KEY("distill.beta", "hidden-layer weight (task runs take theirs from plan.task_grid)",
               plan.distill.beta, nonneg),
      Entry{{"distill.tau", "softmax temperature, at least 1"},
            [](RunConfig& c, const std::string& v) {
              const double t = to_real(v);
              if (!(t >= 1.0)) throw ParameterError("must be at least 1");
              c.plan.distill.tau = t;
            },
            [](const RunConfig& c) { return fmt(c.plan.distill.tau); }},
      REAL_KEY("distill.lambda", "triplet margin", plan.distill.lambda_margin, nonneg),
  };
  return table;
}

#undef COUNT_KEY
#undef REAL_KEY
#undef BOOL_KEY

const Entry& lookup(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ParameterError("unknown key");
}

std::string locate(const std::string& source, std::size_t line) {
  return line ? source + ":" + std::to_string(line) : source;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

ConfigBuilder::ConfigBuilder() = default;

void ConfigBuilder::assign(const std::string& key, const std::string& value,
                           const std::string& origin, std::size_t line) {
  try {
    lookup(key).set(config_, value);
  } catch (const std::invalid_argument& e) {
    throw ParseError(locate(origin, 0) + ": " + key + ": " + e.what(), line);
  }
  origin_[key] = {origin, line};
}

void ConfigBuilder::apply_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string body = trim(raw);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ParseError(source + ": expected 'section.key = value', got '" + body + "'", line);
    }
    assign(trim(body.substr(0, eq)), trim(body.substr(eq + 1)), source, line);
  }
}

void ConfigBuilder::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_text(buf.str(), path.string());
}

void ConfigBuilder::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ParseError("--set: expected key=value, got '" + assignment + "'", 0);
  }
  assign(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), "--set", 0);
}

void ConfigBuilder::set_seed(std::uint64_t seed) {
  config_.seed = seed;
  origin_["run.seed"] = {"--seed", 0};
}

RunConfig ConfigBuilder::build() const {
  RunConfig c = config_;
  c.plan.seed = c.seed;
  c.plan.generator.seed = derive_seed(c.seed, "generator");
  try {
    if (c.plan.generator.num_keypoints < 2) {
      throw ParameterError("generator.num_keypoints must be at least 2");
    }
    c.plan.validate();
  } catch (const ParameterError& e) {
    const std::string what = e.what();
    for (const auto& entry : entries()) {
      const auto& key = entry.key.name;
      if (what.rfind(key, 0) == 0 || what.find(" " + key) != std::string::npos) {
        const auto it = origin_.find(key);
        if (it == origin_.end()) throw ParseError("defaults: " + what, 0);
        throw ParseError(locate(it->second.first, 0) + ": " + what, it->second.second);
      }
    }
    throw ParseError(what, 0);
  }
  return c;
}

std::string render_config(const RunConfig& config) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(config) + "\n";
  return out;
}

}  // namespace distillforge
