// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tpd/dataset/dataset.hpp"
#include "tpd/networks/networks.hpp"

// Evaluation of trained generators: per-plane swaps, cross-model swaps,
// latent interpolation, a Frechet distance in FixedEncoder embedding space and
// image grids. Nothing here writes to a generator; all rendering uses
// midpoint ray samples.
namespace tpd::analysis {

/// Yaw 0, pitch 0, default radius and field of view.
render::CameraPose frontal_pose();
render::CameraPose back_pose();

struct Renders {
  ad::Tensor<float> images;   ///< [N, 3, 2 raw, 2 raw]
  ad::Tensor<float> opacity;  ///< [N, 1, raw, raw]
};

/// z [N, z_dim] -> w [N, w_dim]; every sample is conditioned on `cond`.
ad::Tensor<float> styles(nn::Generator& g, const ad::Tensor<float>& z, const render::CameraPose& cond = frontal_pose());
/// w -> stacked planes [N, 3C, R, R].
ad::Tensor<float> planes(nn::Generator& g, const ad::Tensor<float>& w);
/// Renders stacked planes, one camera for all samples.
Renders render(nn::Generator& g, const ad::Tensor<float>& planes, const render::CameraPose& cam);
/// z -> frontal-conditioned planes.
ad::Tensor<float> planes_from_z(nn::Generator& g, const ad::Tensor<float>& z);

/// Deterministic latent draws.
ad::Tensor<float> latents(std::uint64_t seed, std::size_t n, std::size_t dim);

/// Replaces one plane of every sample in `dst` with the same plane of `src`.
ad::Tensor<float> swap_planes(const ad::Tensor<float>& dst, const ad::Tensor<float>& src, triplane::Plane plane);

struct SwapRow {
  std::string label;        ///< "none", "xy", "xz" or "yz"
  double sim_original = 0;  ///< mean similarity of the swapped render to the receiving identity
  double sim_donor = 0;     ///< mean similarity to the donating identity
  std::size_t toward_donor = 0;  ///< pairs with sim_donor > sim_original
  std::size_t pairs = 0;

  double donor_fraction() const { return pairs ? double(toward_donor) / double(pairs) : 0.0; }
  double original_fraction() const { return pairs ? 1.0 - donor_fraction() : 0.0; }
};

struct SwapReport {
  std::size_t identities = 0;
  std::size_t pairs = 0;
  double self_similarity = 0;  ///< mean similarity of each render to itself
  std::vector<SwapRow> rows;   ///< "none" control first, then the requested planes

  const SwapRow& row(const std::string& label) const;
  std::string text() const;
  std::string csv() const;
};

/// Renders `identities` frontal samples from each generator, forms every
/// unordered pair (i < j), gives identity i the plane of identity j and scores
/// the frontal render against both originals. With `b` null both identities
/// come from `a`; otherwise the donor planes come from `b` and the swapped
/// planes are decoded by `a`.
SwapReport swap_experiment(nn::Generator& a, nn::Generator* b, std::size_t identities, std::uint64_t seed,
                           const std::vector<triplane::Plane>& plane_set = {triplane::kAllPlanes.begin(),
                                                                             triplane::kAllPlanes.end()});

struct CrossSwapReport {
  std::size_t pairs = 0;
  double back_opacity_change = 0;  ///< mean |opacity(head with face xy) - opacity(head)| from behind
  double sim_before = 0;           ///< mean frontal similarity of the head render to the face render
  double sim_after = 0;            ///< same after the head receives the face xy-plane
  std::size_t shifted = 0;         ///< pairs where sim_after > sim_before
  /// Rows: face front, head front, swapped front, head back, swapped back;
  /// one column per pair.
  std::vector<ad::Tensor<float>> grid;

  std::string text() const;
  std::string csv() const;
};

/// Exchanges the xy-plane between face and head tri-planes built from the
/// same z and renders the head from the front and from behind.
CrossSwapReport cross_model_swap(nn::Generator& face, nn::Generator& head, std::size_t pairs, std::uint64_t seed);

/// The head generator rendered with the face generator's xy-plane, no training.
Renders swap_only_render(nn::Generator& face, nn::Generator& head, const ad::Tensor<float>& z,
                         const render::CameraPose& cam);

/// Renders at w(a) = (1 - a) w1 + a w2 for a = k / (steps - 1), one frame per
/// pass. z1, z2 hold z_dim values.
ad::Tensor<float> interpolate(nn::Generator& g, const ad::Tensor<float>& z1, const ad::Tensor<float>& z2,
                              std::size_t steps, const render::CameraPose& pose);

/// Frechet distance between Gaussian fits of two sample sets (rows are
/// samples). eps is added to both covariance diagonals.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = 1e-6);

/// FixedEncoder embeddings of images [N, 3, H, H] as an N x D matrix.
Eigen::MatrixXd embeddings(const ad::Tensor<float>& images);

struct MetricsReport {
  std::size_t samples = 0;
  double feature_distance = 0;
  bool has_identity = false;
  double identity_consistency = 0;  ///< mean frontal similarity to the teacher for the same z

  std::string text() const;
  std::string csv() const;
};

/// Frechet distance between the embeddings of two image batches.
MetricsReport feature_distance(const ad::Tensor<float>& images_a, const ad::Tensor<float>& images_b);

/// Frechet distance between `n` generated images, rendered at poses drawn
/// from the real set, and the first `n` real images. n >= 50 unless the real
/// set is smaller.
MetricsReport eval_feature_distance(nn::Generator& g, const data::ImageSet& real, std::size_t n, std::uint64_t seed,
                                    nn::Generator* teacher = nullptr);

/// Mean frontal similarity between g and reference renders of the same z.
double identity_consistency(nn::Generator& g, nn::Generator& reference, std::size_t n, std::uint64_t seed);

/// Tiles images [3, H, W] (all one size) row-major into a white canvas.
ad::Tensor<float> tile(const std::vector<ad::Tensor<float>>& images, std::size_t rows, std::size_t cols);
/// tile() written as an 8-bit PNG.
void emit_grid(const std::vector<ad::Tensor<float>>& images, std::size_t rows, std::size_t cols,
               const std::filesystem::path& path);

/// Splits a batch [N, C, H, W] into N images.
std::vector<ad::Tensor<float>> unbatch(const ad::Tensor<float>& batch);

}  // namespace tpd::analysis
