#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double top1_accuracy(const Tensor& logits, std::span<const std::size_t> labels);

/**
 * Mean over samples of (mean per-keypoint Euclidean error) / norm_ref[sample].
 * Rows hold flattened (x, y) pairs. Returned as a fraction.
 */
double nrmse(const Tensor& predicted, const Tensor& truth, std::span<const double> norm_ref);

/// Per-sample normalizer: distance between keypoints 0 and 1 of `truth`,
/// replaced by `fallback` where that distance is below 1e-6.
std::vector<double> interocular_distances(const Tensor& truth, double fallback);

/// Mean inter-ocular distance over rows; the dataset-level fallback scale.
double mean_interocular_distance(const Tensor& truth);

/// Fraction of samples whose nearest other sample (Euclidean, lowest index
/// on ties) shares its identity. Exact O(N^2) search.
double verification_top1(const Tensor& embeddings, std::span<const std::size_t> identities);

struct EmbeddingPair {
  std::size_t first = 0;
  std::size_t second = 0;
};

/// Best accuracy of "same iff distance <= threshold" over thresholds at both
/// extremes and at every midpoint between consecutive sorted distances.
double pair_verification_accuracy(std::span<const double> same_distances,
                                  std::span<const double> diff_distances);
double pair_verification_accuracy(const Tensor& embeddings, std::span<const EmbeddingPair> same,
                                  std::span<const EmbeddingPair> diff);

/// Deterministic balanced pair lists over a labelled set: up to `count`
/// same-identity and `count` different-identity pairs.
std::pair<std::vector<EmbeddingPair>, std::vector<EmbeddingPair>> sample_pairs(
    std::span<const std::size_t> identities, std::size_t count, std::uint64_t seed);

// ---- reports --------------------------------------------------------------

struct ReportKey {
  std::string network;
  std::string init;
  double alpha = 0.0;
  double beta = 0.0;

  auto operator<=>(const ReportKey&) const = default;
  bool operator==(const ReportKey&) const = default;
};

struct ReportRow {
  ReportKey key;
  std::map<std::string, double> metrics;  // top1, nrmse, verif_top1, pair_acc
};

/// Rows in insertion order with unique keys.
class MetricsReport {
 public:
  /// Throws ContractError on a duplicate key or an out-of-range value.
  void add(ReportKey key, std::map<std::string, double> metrics);

  const std::vector<ReportRow>& rows() const noexcept { return rows_; }
  const ReportRow* find(const ReportKey& key) const;
  std::size_t size() const noexcept { return rows_.size(); }

  /// Aligned text table, fractions printed as percentages.
  std::string to_text() const;
  /// JSON array of {network, init, alpha, beta, metrics}.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  /// Reads back a table written by to_text().
  static MetricsReport from_text(const std::string& text);

 private:
  std::vector<ReportRow> rows_;
};

}  // namespace distillforge
