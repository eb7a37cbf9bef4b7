// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "tpd/networks/module.hpp"
#include "tpd/renderer/renderer.hpp"
#include "tpd/triplane/triplane.hpp"

// Generator: mapping MLP (z + pose -> w), style-modulated conv backbone
// (w -> tri-plane), radiance decoder (feature -> density, colour/features)
// and a super-resolver (raw feature image -> RGB at twice the size).
// Discriminator: pose-conditioned conv classifier. FixedEncoder: untrained
// conv pyramid used for perceptual and identity features.
//
// Linear and conv weights are stored unit-variance and scaled at run time by
// gain / sqrt(fan_in), so one learning rate suits every layer.
namespace tpd::nn {

struct GeneratorConfig {
  std::size_t z_dim = 64;
  std::size_t w_dim = 64;
  std::size_t mapping_layers = 4;
  std::size_t backbone_channels = 32;
  std::size_t plane_channels = 16;  ///< C
  std::size_t plane_res = 32;       ///< R, a power of two >= 4
  std::size_t decoder_hidden = 64;
  std::size_t feature_channels = 5;  ///< extra raw channels beyond RGB
  std::size_t raw_res = 32;
  std::size_t samples = 48;
  std::size_t sr_channels = 32;

  std::size_t raw_channels() const { return 3 + feature_channels; }
  std::size_t image_res() const { return 2 * raw_res; }
  void validate() const;
  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

template <typename T>
struct GeneratorOutput {
  ad::Var<T> raw;      ///< [N, 3 + C_f, raw, raw], first three channels RGB
  ad::Var<T> opacity;  ///< [N, 1, raw, raw]
  ad::Var<T> image;    ///< [N, 3, 2 raw, 2 raw]
};

class Generator : public Module {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }

  /// z [N, z_dim] and conditioning poses -> w [N, w_dim].
  template <typename T>
  ad::Var<T> map(Bind<T>& bind, const ad::Tensor<float>& z, const std::vector<render::CameraPose>& cond);

  /// w [N, w_dim] -> stacked planes [N, 3C, R, R].
  template <typename T>
  ad::Var<T> synthesize(Bind<T>& bind, const ad::Var<T>& w);

  /// features [N, M, C] -> (density [N, M] >= 0, colour/features [N, M, 3 + C_f]).
  template <typename T>
  std::pair<ad::Var<T>, ad::Var<T>> decode(Bind<T>& bind, const ad::Var<T>& features);

  /// raw [N, 3 + C_f, r, r] -> RGB [N, 3, 2r, 2r].
  template <typename T>
  ad::Var<T> super_resolve(Bind<T>& bind, const ad::Var<T>& raw);

  /// Volume-renders stacked planes from one camera per batch item.
  /// jitter_seed as in render::RenderSettings.
  template <typename T>
  GeneratorOutput<T> render(Bind<T>& bind, const ad::Var<T>& planes, const std::vector<render::CameraPose>& cams,
                            std::optional<std::uint64_t> jitter_seed);

 private:
  struct Dense {
    std::size_t w, b;
    double gain;
    double lr_mul = 1.0;
  };
  struct ModConv {
    std::size_t affine_w, affine_b, w, b;
    std::size_t kernel;
    bool demodulate = true;
  };

  Dense add_dense(const std::string& name, std::size_t in, std::size_t out, double gain, Rng& rng, float bias = 0.0f,
                  double lr_mul = 1.0);
  ModConv add_modconv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng);

  template <typename T>
  ad::Var<T> dense(Bind<T>& bind, const Dense& d, const ad::Var<T>& x);
  template <typename T>
  ad::Var<T> modconv(Bind<T>& bind, const ModConv& m, const ad::Var<T>& x, const ad::Var<T>& w);

  GeneratorConfig cfg_;
  std::vector<Dense> mapping_;
  std::size_t const_input_;
  std::vector<ModConv> blocks_;  ///< blocks_[0] at 4x4, then one per 2x upsample
  ModConv to_planes_;
  Dense dec_hidden_, dec_out_;
  std::size_t sr_conv1_w_, sr_conv1_b_, sr_conv2_w_, sr_conv2_b_;
};

/// Copies all teacher weights into the student. Throws std::invalid_argument
/// when the architectures differ.
void init_student_from_teacher(const Generator& teacher, Generator& student);

struct DiscriminatorConfig {
  std::size_t resolution = 64;  ///< power of two >= 8
  std::size_t base_channels = 16;
  std::size_t max_channels = 64;
  std::size_t hidden = 128;
  std::size_t pose_embed = 32;
  /// Minibatch-stddev group: contiguous runs of this many samples (reduced to
  /// gcd(batch, group) when it does not divide the batch).
  std::size_t mbstd_group = 4;

  void validate() const;
  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

class Discriminator : public Module {
 public:
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

  const DiscriminatorConfig& config() const { return cfg_; }

  /// images [N, 3, res, res] in [0, 1], poses [N, 4] -> logits [N].
  /// Throws ad::ShapeError on a resolution mismatch.
  template <typename T>
  ad::Var<T> forward(Bind<T>& bind, const ad::Var<T>& images, const ad::Tensor<float>& poses);

 private:
  struct Conv {
    std::size_t w, b, stride;
  };
  DiscriminatorConfig cfg_;
  std::vector<Conv> convs_;
  std::size_t fc_w_, fc_b_, pose_w_, pose_b_, out_w_, out_b_;
  std::size_t flat_dim_;
};

/// Untrained conv pyramid with weights drawn uniformly from a fixed seed by
/// a portable generator, so they are bit-identical on every platform.
class FixedEncoder : public Module {
 public:
  static constexpr std::uint64_t kSeed = 0x7d1a5eedULL;
  static constexpr std::size_t kStages = 3;
  static constexpr std::array<std::size_t, kStages> kChannels{8, 16, 32};
  static constexpr std::size_t kEmbedGrid = 4;
  static constexpr std::size_t kEmbedDim = 32 * 4 * 4;

  FixedEncoder();

  /// Per-stage features for images [N, 3, H, W] in [0, 1]; H = W, a power of
  /// two >= 32. Weights enter as constants.
  template <typename T>
  std::vector<ad::Var<T>> stages(ad::Tape<T>& tape, const ad::Var<T>& images) const;

  /// Unit-norm embeddings [N, kEmbedDim].
  ad::Tensor<float> embed(const ad::Tensor<float>& images) const;

  /// Cosine of two rows of unit embeddings.
  static double similarity(const ad::Tensor<float>& a, std::size_t i, const ad::Tensor<float>& b, std::size_t j);
};

}  // namespace tpd::nn
