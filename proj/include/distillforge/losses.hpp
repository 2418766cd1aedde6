#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "distillforge/nets.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

/// Weights of the distillation terms.
///   alpha: soft-prediction term, beta: hidden-layer term,
///   tau: softmax temperature, lambda_margin: triplet margin.
struct DistillConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double tau = 3.0;
  double lambda_margin = 0.4;

  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

// Clamp inside every log of a cross-entropy.
inline constexpr double kLogEpsilon = 1e-12;

/// softmax(logits / tau), row-wise.
Tensor soft_predictions(const Tensor& logits, double tau);

/// Batch mean of -sum_k target_k * log(max(pred_k, eps)). The prediction goes in
/// the first slot and the target in the second.
Tensor cross_entropy(const Tensor& pred, const Tensor& target);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

Tensor softmax_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// softmax_loss + alpha * H(soft(student), soft(teacher)). The teacher side
/// is treated as a constant.
Tensor distill_cls_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                        std::span<const std::size_t> labels, const DistillConfig& cfg);

/// Batch mean of squared Euclidean distance between rows.
Tensor euclidean_loss(const Tensor& prediction, const Tensor& target);

/// Batch mean of ||K_S - K_T||^2; the gradient reaches only K_S.
Tensor hidden_match_loss(const Tensor& student_embedding, const Tensor& teacher_embedding);

/// task + alpha * soft + beta * hidden. Terms with a zero weight are skipped,
/// so the reduced forms are bitwise identical to the task loss.
Tensor general_distill_loss(const Tensor& task_loss, const Tensor& soft_term,
                            const Tensor& hidden_term, const DistillConfig& cfg);

/// Same as above, building a term only when its weight is nonzero.
Tensor general_distill_loss(const Tensor& task_loss, const std::function<Tensor()>& soft_term,
                            const std::function<Tensor()>& hidden_term,
                            const DistillConfig& cfg);

/// Regression distillation: ||R_S - y||^2 + alpha H(P_S^tau, P_T^tau) + beta ||K_S - K_T||^2.
Tensor align_distill_loss(const NetOutputs& student, const NetOutputs& teacher,
                          const Tensor& keypoints, const DistillConfig& cfg);

/// Batch mean of max(0, ||a - p||^2 - ||a - n||^2 + margin).
Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double margin);

/// Row indices of each triplet member into a batch of network outputs.
struct TripletRows {
  std::vector<std::size_t> anchor;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};

/**
 * Verification distillation over a batch holding every distinct sample of a
 * set of triplets. The triplet term uses the rows named by `triplets`; the
 * soft and hidden terms cover every row of the batch. With
 * `include_softmax`, the softmax loss on `labels` (one per row) is added.
 */
Tensor verif_distill_loss(const NetOutputs& student, const NetOutputs& teacher,
                          const TripletRows& triplets, const DistillConfig& cfg,
                          bool include_softmax,
                          std::optional<std::span<const std::size_t>> labels = std::nullopt);

}  // namespace distillforge
