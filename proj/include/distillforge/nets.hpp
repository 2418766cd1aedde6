#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "distillforge/tensor.hpp"

namespace distillforge {

/// Layer widths of a teacher (divisor 1) or a width-divided student.
/// Only the hidden widths are divided; embedding_dim and num_classes are
/// shared so teacher and student embeddings and logits line up.
struct NetworkSpec {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden_widths{256, 256, 128};
  std::size_t embedding_dim = 64;
  std::size_t num_classes = 32;
  std::size_t num_keypoint_coords = 10;
  std::size_t width_divisor = 1;

  /// ceil(width / width_divisor) for each base width.
  std::vector<std::size_t> divided_widths() const;
  NetworkSpec with_divisor(std::size_t divisor) const;
  void validate() const;

  bool operator==(const NetworkSpec&) const = default;
};

std::string to_string(const NetworkSpec& spec);

/// Per-feature standardization fitted on training features.
struct InputNormalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static InputNormalizer identity(std::size_t dim);
  static InputNormalizer fit(const Tensor& features);
  Tensor apply(const Tensor& batch) const;

  bool operator==(const InputNormalizer&) const = default;
};

/// The three heads every loss consumes.
struct NetOutputs {
  Tensor logits;      // [B x num_classes]
  Tensor embedding;   // K, [B x embedding_dim]
  Tensor regression;  // R, [B x num_keypoint_coords]
};

/**
 * Fully-connected network: ReLU hidden layers, a linear embedding layer K,
 * and two linear heads on K (class logits and keypoint regression).
 *
 * Parameters are stored in build order: (W, b) per hidden layer, then the
 * embedding layer, the logits head and the regression head.
 */
class Network {
 public:
  static Network build(const NetworkSpec& spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }
  const InputNormalizer& normalizer() const noexcept { return normalizer_; }
  void set_normalizer(InputNormalizer normalizer);
  std::size_t parameter_count() const;

  /// Records gradients into the parameters.
  NetOutputs forward(const Tensor& batch) const;
  /// Same values as forward() without recording anything; used for teachers
  /// and evaluation.
  NetOutputs infer(const Tensor& batch) const;

  /// Independent value-copy (parameters and normalizer).
  Network clone() const;

  void clear_grads();

 private:
  Network(NetworkSpec spec, std::vector<Tensor> params, InputNormalizer normalizer);
  NetOutputs run(const Tensor& batch, bool record) const;

  NetworkSpec spec_;
  std::vector<Tensor> params_;
  InputNormalizer normalizer_;

  friend Network load_checkpoint(const std::filesystem::path& path);
};

/// Shapes of the parameters for `spec`, in build order.
std::vector<Shape> parameter_shapes(const NetworkSpec& spec);

/// dst takes an independent copy of src's parameters and normalizer.
/// Throws ContractError when the NetworkSpecs differ.
void copy_parameters(const Network& src, Network& dst);

/// Text checkpoint: a version header, the NetworkSpec, the normalizer and each
/// parameter in build order. Values are written as hex floats, so a
/// save/load round trip is bitwise exact.
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace distillforge
