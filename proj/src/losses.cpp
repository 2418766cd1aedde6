#include "distillforge/losses.hpp"

#include <string>

#include "distillforge/errors.hpp"

namespace distillforge {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

double batch_size_of(const Tensor& t) {
  return t.rank() == 2 ? static_cast<double>(t.rows()) : 1.0;
}

Tensor batch_mean_sq_dist(const Tensor& a, const Tensor& b) {
  return scale(sum(square(sub(a, b))), 1.0 / batch_size_of(a));
}

}  // namespace

void DistillConfig::validate() const {
  if (!(alpha >= 0.0)) throw ParameterError("distill.alpha must be nonnegative");
  if (!(beta >= 0.0)) throw ParameterError("distill.beta must be nonnegative");
  if (!(tau >= 1.0)) throw ParameterError("distill.tau must be at least 1");
  if (!(lambda_margin >= 0.0)) throw ParameterError("distill.lambda must be nonnegative");
}

Tensor soft_predictions(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("soft_predictions: tau must be positive");
  if (tau == 1.0) return softmax_rows(logits);
  return softmax_rows(scale(logits, 1.0 / tau));
}

Tensor cross_entropy(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "cross_entropy");
  for (double v : target.data()) {
    if (v < 0.0) throw ContractError("cross_entropy: target has a negative entry");
  }
  const Tensor total = sum(mul(target, log_clamped(pred, kLogEpsilon)));
  return scale(total, -1.0 / batch_size_of(pred));
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  std::vector<double> values(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw ContractError("label " + std::to_string(labels[i]) + " out of range for " +
                          std::to_string(num_classes) + " classes");
    }
    values[i * num_classes + labels[i]] = 1.0;
  }
  return Tensor({labels.size(), num_classes}, std::move(values));
}

Tensor softmax_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.rows() != labels.size()) {
    throw DimensionError("softmax_loss: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_to_string(logits.shape()));
  }
  return cross_entropy(softmax_rows(logits), one_hot(labels, logits.cols()));
}

Tensor general_distill_loss(const Tensor& task_loss, const Tensor& soft_term,
                            const Tensor& hidden_term, const DistillConfig& cfg) {
  return general_distill_loss(
      task_loss, [&] { return soft_term; }, [&] { return hidden_term; }, cfg);
}

Tensor general_distill_loss(const Tensor& task_loss, const std::function<Tensor()>& soft_term,
                            const std::function<Tensor()>& hidden_term,
                            const DistillConfig& cfg) {
  Tensor total = task_loss;
  if (cfg.alpha != 0.0) total = add(total, scale(soft_term(), cfg.alpha));
  if (cfg.beta != 0.0) total = add(total, scale(hidden_term(), cfg.beta));
  return total;
}

Tensor distill_cls_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                        std::span<const std::size_t> labels, const DistillConfig& cfg) {
  require_same(student_logits, teacher_logits, "distill_cls_loss");
  Tensor loss = softmax_loss(student_logits, labels);
  if (cfg.alpha == 0.0) return loss;
  const Tensor soft = cross_entropy(soft_predictions(student_logits, cfg.tau),
                                    soft_predictions(teacher_logits.detach(), cfg.tau));
  return add(loss, scale(soft, cfg.alpha));
}

Tensor euclidean_loss(const Tensor& prediction, const Tensor& target) {
  require_same(prediction, target, "euclidean_loss");
  return batch_mean_sq_dist(prediction, target);
}

Tensor hidden_match_loss(const Tensor& student_embedding, const Tensor& teacher_embedding) {
  require_same(student_embedding, teacher_embedding, "hidden_match_loss");
  return batch_mean_sq_dist(student_embedding, teacher_embedding.detach());
}

Tensor align_distill_loss(const NetOutputs& student, const NetOutputs& teacher,
                          const Tensor& keypoints, const DistillConfig& cfg) {
  return general_distill_loss(
      euclidean_loss(student.regression, keypoints),
      [&] {
        return cross_entropy(soft_predictions(student.logits, cfg.tau),
                             soft_predictions(teacher.logits.detach(), cfg.tau));
      },
      [&] { return hidden_match_loss(student.embedding, teacher.embedding); }, cfg);
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                    double margin) {
  require_same(anchor, positive, "triplet_loss");
  require_same(anchor, negative, "triplet_loss");
  const Tensor pos_dist = sum_rows(square(sub(anchor, positive)));
  const Tensor neg_dist = sum_rows(square(sub(anchor, negative)));
  return mean(relu(add_scalar(sub(pos_dist, neg_dist), margin)));
}

Tensor verif_distill_loss(const NetOutputs& student, const NetOutputs& teacher,
                          const TripletRows& triplets, const DistillConfig& cfg,
                          bool include_softmax,
                          std::optional<std::span<const std::size_t>> labels) {
  if (include_softmax && !labels) {
    throw ContractError("verif_distill_loss: joint softmax requested without labels");
  }
  if (triplets.anchor.size() != triplets.positive.size() ||
      triplets.anchor.size() != triplets.negative.size()) {
    throw DimensionError("verif_distill_loss: triplet member lists differ in length");
  }
  require_same(student.embedding, teacher.embedding, "verif_distill_loss");
  const Tensor& k = student.embedding;
  Tensor loss = general_distill_loss(
      triplet_loss(gather_rows(k, triplets.anchor), gather_rows(k, triplets.positive),
                   gather_rows(k, triplets.negative), cfg.lambda_margin),
      [&] {
        return cross_entropy(soft_predictions(student.logits, cfg.tau),
                             soft_predictions(teacher.logits.detach(), cfg.tau));
      },
      [&] { return hidden_match_loss(student.embedding, teacher.embedding); }, cfg);
  if (include_softmax) loss = add(loss, softmax_loss(student.logits, *labels));
  return loss;
}

}  // namespace distillforge
