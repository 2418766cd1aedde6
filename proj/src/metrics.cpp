#include "distillforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "distillforge/errors.hpp"
#include "distillforge/random.hpp"

namespace distillforge {

namespace {

const std::vector<std::string> kMetricColumns = {"top1", "nrmse", "verif_top1", "pair_acc"};

bool is_fraction_metric(const std::string& name) { return name != "nrmse"; }

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double d = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double diff = a[i] - b[i];
    d += diff * diff;
  }
  return d;
}

}  // namespace

double top1_accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (n == 0) throw ContractError("top1_accuracy: empty batch");
  if (labels.size() != n) throw DimensionError("top1_accuracy: label count does not match rows");
  const auto x = logits.data();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = x.data() + r * c;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    if (best == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double nrmse(const Tensor& predicted, const Tensor& truth, std::span<const double> norm_ref) {
  if (predicted.shape() != truth.shape()) {
    throw DimensionError("nrmse: shape mismatch " + shape_to_string(predicted.shape()) + " vs " +
                         shape_to_string(truth.shape()));
  }
  const std::size_t n = truth.rows(), coords = truth.cols();
  if (coords % 2 != 0) throw DimensionError("nrmse: odd number of keypoint coordinates");
  if (norm_ref.size() != n) throw DimensionError("nrmse: one normalizer per sample required");
  if (n == 0 || coords == 0) throw ContractError("nrmse: empty input");
  const auto p = predicted.data(), t = truth.data();
  const std::size_t k = coords / 2;
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!(norm_ref[r] > 0.0)) throw ContractError("nrmse: normalizer must be positive");
    double err = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dx = p[r * coords + 2 * j] - t[r * coords + 2 * j];
      const double dy = p[r * coords + 2 * j + 1] - t[r * coords + 2 * j + 1];
      err += std::sqrt(dx * dx + dy * dy);
    }
    total += err / static_cast<double>(k) / norm_ref[r];
  }
  return total / static_cast<double>(n);
}

std::vector<double> interocular_distances(const Tensor& truth, double fallback) {
  const std::size_t n = truth.rows(), coords = truth.cols();
  std::vector<double> out(n, fallback);
  if (coords < 4) return out;
  const auto t = truth.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double d = std::hypot(t[r * coords] - t[r * coords + 2], t[r * coords + 1] - t[r * coords + 3]);
    if (d >= 1e-6) out[r] = d;
  }
  return out;
}

double mean_interocular_distance(const Tensor& truth) {
  const auto d = interocular_distances(truth, 0.0);
  double total = 0.0;
  for (double v : d) total += v;
  const double m = d.empty() ? 0.0 : total / static_cast<double>(d.size());
  return m >= 1e-6 ? m : 1.0;
}

double verification_top1(const Tensor& embeddings, std::span<const std::size_t> identities) {
  const std::size_t n = embeddings.rows(), dim = embeddings.cols();
  if (n < 2) throw ContractError("verification_top1: need at least two samples");
  if (identities.size() != n) {
    throw DimensionError("verification_top1: identity count does not match rows");
  }
  const double* e = embeddings.data().data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t nearest = i;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = squared_distance(e + i * dim, e + j * dim, dim);
      if (d < best) {
        best = d;
        nearest = j;
      }
    }
    if (identities[nearest] == identities[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double pair_verification_accuracy(std::span<const double> same_distances,
                                  std::span<const double> diff_distances) {
  if (same_distances.empty() || diff_distances.empty()) {
    throw ContractError("pair_verification_accuracy: need at least one pair of each kind");
  }
  // (distance, is_same), swept in ascending order. Below every distance all
  // pairs are called "different".
  std::vector<std::pair<double, bool>> all;
  all.reserve(same_distances.size() + diff_distances.size());
  for (double d : same_distances) all.emplace_back(d, true);
  for (double d : diff_distances) all.emplace_back(d, false);
  std::sort(all.begin(), all.end());

  const double total = static_cast<double>(all.size());
  std::size_t correct = diff_distances.size();
  std::size_t best = correct;
  for (std::size_t i = 0; i < all.size();) {
    // Move the threshold past every pair at this distance.
    const double d = all[i].first;
    for (; i < all.size() && all[i].first == d; ++i) {
      if (all[i].second) {
        ++correct;
      } else {
        --correct;
      }
    }
    best = std::max(best, correct);
  }
  return static_cast<double>(best) / total;
}

double pair_verification_accuracy(const Tensor& embeddings, std::span<const EmbeddingPair> same,
                                  std::span<const EmbeddingPair> diff) {
  const std::size_t dim = embeddings.cols();
  const double* e = embeddings.data().data();
  auto distances = [&](std::span<const EmbeddingPair> pairs) {
    std::vector<double> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
      if (p.first >= embeddings.rows() || p.second >= embeddings.rows()) {
        throw DimensionError("pair_verification_accuracy: pair index out of range");
      }
      out.push_back(std::sqrt(squared_distance(e + p.first * dim, e + p.second * dim, dim)));
    }
    return out;
  };
  const auto s = distances(same);
  const auto d = distances(diff);
  return pair_verification_accuracy(s, d);
}

std::pair<std::vector<EmbeddingPair>, std::vector<EmbeddingPair>> sample_pairs(
    std::span<const std::size_t> identities, std::size_t count, std::uint64_t seed) {
  std::vector<EmbeddingPair> same, diff;
  const std::size_t n = identities.size();
  if (n < 2 || count == 0) return {same, diff};
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  bool any_same = false, any_diff = false;
  for (std::size_t i = 0; i < n && !(any_same && any_diff); ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      (identities[i] == identities[j] ? any_same : any_diff) = true;
    }
  while (any_same && same.size() < count) {
    const auto a = pick(rng), b = pick(rng);
    if (a != b && identities[a] == identities[b]) same.push_back({a, b});
  }
  while (any_diff && diff.size() < count) {
    const auto a = pick(rng), b = pick(rng);
    if (identities[a] != identities[b]) diff.push_back({a, b});
  }
  return {same, diff};
}

// ---- MetricsReport --------------------------------------------------------

void MetricsReport::add(ReportKey key, std::map<std::string, double> metrics) {
  if (find(key)) {
    throw ContractError("metrics report: duplicate row " + key.network + "/" + key.init);
  }
  for (const auto& [name, value] : metrics) {
    if (std::find(kMetricColumns.begin(), kMetricColumns.end(), name) == kMetricColumns.end()) {
      throw ContractError("metrics report: unknown metric '" + name + "'");
    }
    const bool ok = is_fraction_metric(name) ? (value >= 0.0 && value <= 1.0) : value >= 0.0;
    if (!ok) throw ContractError("metrics report: " + name + " out of range");
  }
  rows_.push_back({std::move(key), std::move(metrics)});
}

const ReportRow* MetricsReport::find(const ReportKey& key) const {
  for (const auto& r : rows_)
    if (r.key == key) return &r;
  return nullptr;
}

std::string MetricsReport::to_text() const {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"network", "init", "alpha", "beta", "top1(%)", "nrmse(%)", "verif_top1(%)",
                   "pair_acc(%)"});
  for (const auto& row : rows_) {
    std::vector<std::string> line{row.key.network, row.key.init};
    std::ostringstream a, b;
    a << row.key.alpha;
    b << row.key.beta;
    line.push_back(a.str());
    line.push_back(b.str());
    for (const auto& col : kMetricColumns) {
      auto it = row.metrics.find(col);
      if (it == row.metrics.end()) {
        line.emplace_back("-");
      } else {
        std::ostringstream v;
        v << std::fixed << std::setprecision(8) << 100.0 * it->second;
        line.push_back(v.str());
      }
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());

  std::ostringstream os;
  auto rule = [&] {
    for (std::size_t i = 0; i < width.size(); ++i) os << (i ? "-+-" : "") << std::string(width[i], '-');
    os << '\n';
  };
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      if (i) os << " | ";
      os << std::left << std::setw(static_cast<int>(width[i])) << cells[r][i];
    }
    os << '\n';
    if (r == 0) rule();
  }
  return os.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : rows_) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [name, value] : row.metrics) metrics[name] = value;
    rows.push_back({{"network", row.key.network},
                    {"init", row.key.init},
                    {"alpha", row.key.alpha},
                    {"beta", row.key.beta},
                    {"metrics", metrics}});
  }
  return rows.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport report;
  const auto rows = nlohmann::json::parse(text);
  for (const auto& row : rows) {
    ReportKey key{row.at("network").get<std::string>(), row.at("init").get<std::string>(),
                  row.at("alpha").get<double>(), row.at("beta").get<double>()};
    std::map<std::string, double> metrics;
    for (const auto& [name, value] : row.at("metrics").items()) metrics[name] = value.get<double>();
    report.add(std::move(key), std::move(metrics));
  }
  return report;
}

MetricsReport MetricsReport::from_text(const std::string& text) {
  MetricsReport report;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no <= 2 || line.empty()) continue;  // header and rule
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto bar = line.find(" | ", start);
      std::string f = line.substr(start, bar == std::string::npos ? std::string::npos : bar - start);
      f.erase(f.find_last_not_of(' ') + 1);
      fields.push_back(f);
      if (bar == std::string::npos) break;
      start = bar + 3;
    }
    if (fields.size() != 4 + kMetricColumns.size()) {
      throw ParseError("metrics table: expected " + std::to_string(4 + kMetricColumns.size()) +
                           " columns",
                       line_no);
    }
    ReportKey key{fields[0], fields[1], std::stod(fields[2]), std::stod(fields[3])};
    std::map<std::string, double> metrics;
    for (std::size_t i = 0; i < kMetricColumns.size(); ++i) {
      if (fields[4 + i] != "-") metrics[kMetricColumns[i]] = std::stod(fields[4 + i]) / 100.0;
    }
    report.add(std::move(key), std::move(metrics));
  }
  return report;
}

}  // namespace distillforge
