#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "distillforge/random.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

/// Knobs of the identity + pose latent model.
struct GeneratorParams {
  std::size_t num_identities = 32;
  std::size_t samples_per_identity = 50;
  std::size_t input_dim = 64;
  std::size_t latent_dim = 8;
  std::size_t pose_dim = 4;
  std::size_t num_keypoints = 5;
  double identity_keypoint_scale = 0.1;
  double pose_keypoint_scale = 1.0;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  std::size_t num_keypoint_coords() const { return 2 * num_keypoints; }
  void validate() const;
  bool operator==(const GeneratorParams&) const = default;
};

struct Sample {
  std::vector<double> features;
  std::size_t identity = 0;
  std::vector<double> keypoints;  // flattened (x, y) pairs

  bool operator==(const Sample&) const = default;
};

struct SplitDataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  GeneratorParams generator;

  std::size_t input_dim() const;
  std::size_t num_keypoint_coords() const;
  /// One more than the largest identity seen in either split.
  std::size_t num_identities() const;
};

/**
 * Linear-Gaussian generative model behind the synthetic faces.
 *
 *   features  = M_id z_i + M_pose p + noise
 *   keypoints = template + s_pose A p + s_id B z_i + noise
 *
 * Identity drives the features strongly and the keypoints weakly; pose drives
 * the keypoints strongly.
 */
class LatentModel {
 public:
  static LatentModel draw(const GeneratorParams& params, Rng& rng);

  const GeneratorParams& params() const noexcept { return params_; }
  std::span<const double> identity_latent(std::size_t identity) const;
  std::span<const double> keypoint_template() const noexcept { return template_; }

  /// One observation of `identity` at `pose`; noise is drawn from `rng`.
  Sample sample(std::size_t identity, std::span<const double> pose, Rng& rng) const;

 private:
  GeneratorParams params_;
  std::vector<double> latents_;          // num_identities x latent_dim
  std::vector<double> id_features_;      // input_dim x latent_dim
  std::vector<double> pose_features_;    // input_dim x pose_dim
  std::vector<double> pose_keypoints_;   // coords x pose_dim
  std::vector<double> id_keypoints_;     // coords x latent_dim
  std::vector<double> template_;         // coords
};

/// Deterministic in params (including seed). Each identity is split 80/20.
SplitDataset generate(const GeneratorParams& params);

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

/// Uniform random valid triplets over indices into `identities`.
/// Throws DataError when an identity has fewer than two samples or only one
/// identity is present.
std::vector<Triplet> make_triplets(std::span<const std::size_t> identities, std::size_t count,
                                   std::uint64_t seed);
/// Triplets over ds.train.
std::vector<Triplet> make_triplets(const SplitDataset& ds, std::size_t count, std::uint64_t seed);

/// Text format: header `distillforge-dataset v1 <n> <input_dim> <coords>`,
/// then `<train|test> <identity> <features...> <keypoints...>` per sample.
void save_dataset(const SplitDataset& ds, const std::filesystem::path& path);
SplitDataset load_dataset(const std::filesystem::path& path);

// Batch assembly from sample lists.
Tensor features_matrix(const std::vector<Sample>& samples, std::span<const std::size_t> rows);
Tensor features_matrix(const std::vector<Sample>& samples);
Tensor keypoints_matrix(const std::vector<Sample>& samples, std::span<const std::size_t> rows);
Tensor keypoints_matrix(const std::vector<Sample>& samples);
std::vector<std::size_t> identities_of(const std::vector<Sample>& samples);

}  // namespace distillforge
