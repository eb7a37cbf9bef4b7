// SPDX-License-Identifier: Apache-2.0
#include "tpd/networks/networks.hpp"

#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tpd::nn {
namespace {

constexpr double kLreluGain = 1.4142135623730951;
// Mapping layers learn at 1/100 of the base rate, which keeps the style codes
// from collapsing early in adversarial training.
constexpr double kMappingLrMul = 0.01;
// Learned SR detail starts small relative to the upsampled raw colour.
constexpr double kSrResidualGain = 0.1;
// Empty space at init: softplus(-1) ~ 0.31.
constexpr double kDensityBias = -1.0;

bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

template <typename T>
ad::Var<T> scaled(const ad::Var<T>& w, double c) {
  return ad::scale(w, static_cast<T>(c));
}

/// Repeats a [1, ...] node n times along the batch axis.
template <typename T>
ad::Var<T> repeat_batch(const ad::Var<T>& x, std::size_t n) {
  if (n == 1) return x;
  return ad::concat(std::vector<ad::Var<T>>(n, x), 0);
}

/// Discriminator activation. Smooth, so the finite-difference R1 gradient
/// does not see kinks.
template <typename T>
ad::Var<T> smooth_act(const ad::Var<T>& x) {
  return ad::smooth_leaky_relu(x, T(0.2), T(0.1));
}

/// One extra feature map per sample holding the mean standard deviation of
/// x over its group. Groups are contiguous runs of the batch, so batches built
/// by concatenating equal-sized parts never mix parts when the group size
/// divides the part size.
template <typename T>
ad::Var<T> minibatch_stddev(const ad::Var<T>& x, std::size_t group) {
  const auto& s = x.shape();
  const std::size_t n = s[0];
  const std::size_t g = std::gcd(n, group);
  auto& tape = x.tape();
  const auto ones = tape.constant(ad::Tensor<T>(ad::Shape{1, 1, s[2], s[3]}, T(1)));
  std::vector<ad::Var<T>> maps;
  for (std::size_t k = 0; k < n; k += g) {
    std::vector<ad::Var<T>> members;
    ad::Var<T> sum;
    for (std::size_t j = 0; j < g; ++j) {
      members.push_back(ad::slice(x, 0, k + j, k + j + 1));
      sum = j == 0 ? members.back() : ad::add(sum, members.back());
    }
    const auto mu = ad::scale(sum, T(1.0 / double(g)));
    ad::Var<T> var;
    for (std::size_t j = 0; j < g; ++j) {
      const auto d = ad::square(ad::sub(members[j], mu));
      var = j == 0 ? d : ad::add(var, d);
    }
    const auto sd = ad::mean(ad::sqrt(ad::add_scalar(ad::scale(var, T(1.0 / double(g))), T(1e-8))));
    const auto fill = ad::scale_channels(ones, ad::reshape(sd, ad::Shape{1, 1}));
    for (std::size_t j = 0; j < g; ++j) maps.push_back(fill);
  }
  return ad::concat(maps, 0);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (z_dim == 0 || w_dim == 0 || mapping_layers == 0) throw std::invalid_argument("GeneratorConfig: empty mapping network");
  if (!is_pow2(plane_res) || plane_res < 4) throw std::invalid_argument("GeneratorConfig: plane_res must be a power of two >= 4");
  if (plane_channels == 0 || backbone_channels == 0 || decoder_hidden == 0 || sr_channels == 0)
    throw std::invalid_argument("GeneratorConfig: zero channel count");
  if (raw_res == 0) throw std::invalid_argument("GeneratorConfig: raw_res must be positive");
  if (samples < 2) throw std::invalid_argument("GeneratorConfig: samples must be >= 2");
}

Generator::Dense Generator::add_dense(const std::string& name, std::size_t in, std::size_t out, double gain, Rng& rng,
                                      float bias, double lr_mul) {
  Dense d;
  d.w = add_param(name + ".weight", normal_init(ad::Shape{out, in}, rng, 1.0 / lr_mul));
  d.b = add_param(name + ".bias", ad::Tensor<float>(ad::Shape{out}, static_cast<float>(bias / lr_mul)));
  d.gain = gain * lr_mul / std::sqrt(static_cast<double>(in));
  d.lr_mul = lr_mul;
  return d;
}

Generator::ModConv Generator::add_modconv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                                          Rng& rng) {
  ModConv m;
  // Style affine starts as the identity scale.
  m.affine_w = add_param(name + ".affine.weight", normal_init(ad::Shape{in, cfg_.w_dim}, rng));
  m.affine_b = add_param(name + ".affine.bias", ad::Tensor<float>(ad::Shape{in}, 1.0f));
  m.w = add_param(name + ".weight", normal_init(ad::Shape{out, in, k, k}, rng));
  m.b = add_param(name + ".bias", ad::Tensor<float>(ad::Shape{out}));
  m.kernel = k;
  return m;
}

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x6e6e));
  std::size_t in = cfg_.z_dim + render::kPoseDim;
  for (std::size_t i = 0; i < cfg_.mapping_layers; ++i) {
    mapping_.push_back(add_dense("mapping." + std::to_string(i), in, cfg_.w_dim, kLreluGain, rng, 0.0f, kMappingLrMul));
    in = cfg_.w_dim;
  }
  const std::size_t ch = cfg_.backbone_channels;
  const_input_ = add_param("backbone.const", normal_init(ad::Shape{1, ch, 4, 4}, rng));
  blocks_.push_back(add_modconv("backbone.b4", ch, ch, 3, rng));
  for (std::size_t r = 8; r <= cfg_.plane_res; r *= 2) blocks_.push_back(add_modconv("backbone.b" + std::to_string(r), ch, ch, 3, rng));
  to_planes_ = add_modconv("backbone.to_planes", ch, 3 * cfg_.plane_channels, 1, rng);
  to_planes_.demodulate = false;
  dec_hidden_ = add_dense("decoder.hidden", cfg_.plane_channels, cfg_.decoder_hidden, 1.0, rng);
  dec_out_ = add_dense("decoder.out", cfg_.decoder_hidden, 1 + cfg_.raw_channels(), 1.0, rng);
  sr_conv1_w_ = add_param("sr.conv1.weight", normal_init(ad::Shape{cfg_.sr_channels, cfg_.raw_channels(), 3, 3}, rng));
  sr_conv1_b_ = add_param("sr.conv1.bias", ad::Tensor<float>(ad::Shape{cfg_.sr_channels}));
  sr_conv2_w_ = add_param("sr.conv2.weight", normal_init(ad::Shape{3, cfg_.sr_channels, 3, 3}, rng));
  sr_conv2_b_ = add_param("sr.conv2.bias", ad::Tensor<float>(ad::Shape{3}));
}

template <typename T>
ad::Var<T> Generator::dense(Bind<T>& bind, const Dense& d, const ad::Var<T>& x) {
  auto b = bind(param(d.b));
  if (d.lr_mul != 1.0) b = scaled(b, d.lr_mul);
  return ad::linear(x, scaled(bind(param(d.w)), d.gain), b);
}

template <typename T>
ad::Var<T> Generator::modconv(Bind<T>& bind, const ModConv& m, const ad::Var<T>& x, const ad::Var<T>& w) {
  const auto& a = param(m.affine_w).value;
  const auto style = ad::linear(w, scaled(bind(param(m.affine_w)), 1.0 / std::sqrt(double(a.dim(1)))), bind(param(m.affine_b)));
  const auto& wt = param(m.w).value;
  const std::size_t co = wt.dim(0), ci = wt.dim(1), kk = wt.dim(2) * wt.dim(3);
  const double fan_in = static_cast<double>(ci * kk);
  const double gain = (m.kernel == 1 ? 1.0 : kLreluGain) / std::sqrt(fan_in);
  const auto weight = scaled(bind(param(m.w)), gain);
  auto y = ad::conv2d(ad::scale_channels(x, style), weight, bind(param(m.b)), 1, m.kernel / 2);
  if (m.demodulate) {
    // Output channel o of sample n is divided by sqrt(sum_{i,k} (w_oik s_ni)^2),
    // restoring unit variance whatever the style; the lrelu gain is kept. The
    // bias is rescaled with it.
    const auto w2 = ad::reshape(ad::matmul(ad::reshape(ad::square(weight), ad::Shape{co * ci, kk}),
                                           bind.tape().constant(ad::Tensor<T>(ad::Shape{kk, 1}, T(1)))),
                                ad::Shape{co, ci});
    const auto norm = ad::rsqrt(ad::add_scalar(ad::linear(ad::square(style), w2, ad::Var<T>{}), T(1e-8)));
    y = ad::scale_channels(y, ad::scale(norm, T(m.kernel == 1 ? 1.0 : kLreluGain)));
  }
  return y;
}

template <typename T>
ad::Var<T> Generator::map(Bind<T>& bind, const ad::Tensor<float>& z, const std::vector<render::CameraPose>& cond) {
  if (z.rank() != 2 || z.dim(1) != cfg_.z_dim || z.dim(0) != cond.size()) {
    throw ad::ShapeError("Generator::map", "z " + ad::shape_str(z.shape()) + " with " + std::to_string(cond.size()) + " poses");
  }
  const std::size_t n = z.dim(0), in = cfg_.z_dim + render::kPoseDim;
  ad::Tensor<T> x(ad::Shape{n, in});
  for (std::size_t i = 0; i < n; ++i) {
    // Normalise z to unit second moment.
    double ms = 0;
    for (std::size_t k = 0; k < cfg_.z_dim; ++k) ms += double(z[i * cfg_.z_dim + k]) * z[i * cfg_.z_dim + k];
    const double inv = 1.0 / std::sqrt(ms / double(cfg_.z_dim) + 1e-8);
    for (std::size_t k = 0; k < cfg_.z_dim; ++k) x[i * in + k] = static_cast<T>(z[i * cfg_.z_dim + k] * inv);
    const auto pv = render::pose_vector(cond[i]);
    for (std::size_t k = 0; k < render::kPoseDim; ++k) x[i * in + cfg_.z_dim + k] = static_cast<T>(pv[k]);
  }
  auto h = bind.tape().constant(std::move(x));
  for (const auto& d : mapping_) h = ad::leaky_relu(dense(bind, d, h), T(0.2));
  return h;
}

template <typename T>
ad::Var<T> Generator::synthesize(Bind<T>& bind, const ad::Var<T>& w) {
  if (w.shape().size() != 2 || w.shape()[1] != cfg_.w_dim) throw ad::ShapeError("Generator::synthesize", "w " + ad::shape_str(w.shape()));
  auto x = repeat_batch(bind(param(const_input_)), w.shape()[0]);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (i > 0) x = ad::upsample_nearest2x(x);
    x = ad::leaky_relu(modconv(bind, blocks_[i], x, w), T(0.2));
  }
  return modconv(bind, to_planes_, x, w);
}

template <typename T>
std::pair<ad::Var<T>, ad::Var<T>> Generator::decode(Bind<T>& bind, const ad::Var<T>& features) {
  const auto& s = features.shape();
  if (s.size() != 3 || s[2] != cfg_.plane_channels) throw ad::ShapeError("Generator::decode", "features " + ad::shape_str(s));
  const std::size_t n = s[0], m = s[1], k = cfg_.raw_channels();
  auto h = ad::softplus(dense(bind, dec_hidden_, ad::reshape(features, ad::Shape{n * m, s[2]})));
  auto out = ad::reshape(dense(bind, dec_out_, h), ad::Shape{n, m, 1 + k});
  auto sigma = ad::reshape(ad::softplus(ad::add_scalar(ad::slice(out, 2, 0, 1), T(kDensityBias))), ad::Shape{n, m});
  // Colour squashed to slightly beyond [0, 1] so saturated values keep a gradient.
  auto color = ad::add_scalar(ad::scale(ad::sigmoid(ad::slice(out, 2, 1, 1 + k)), T(1.002)), T(-0.001));
  return {sigma, color};
}

template <typename T>
ad::Var<T> Generator::super_resolve(Bind<T>& bind, const ad::Var<T>& raw) {
  const auto& s = raw.shape();
  if (s.size() != 4 || s[1] != cfg_.raw_channels()) throw ad::ShapeError("Generator::super_resolve", "raw " + ad::shape_str(s));
  const double g1 = kLreluGain / std::sqrt(double(cfg_.raw_channels() * 9));
  const double g2 = kSrResidualGain / std::sqrt(double(cfg_.sr_channels * 9));
  auto h = ad::leaky_relu(ad::conv2d(raw, scaled(bind(param(sr_conv1_w_)), g1), bind(param(sr_conv1_b_)), 1, 1), T(0.2));
  h = ad::conv2d(ad::upsample_bilinear2x(h), scaled(bind(param(sr_conv2_w_)), g2), bind(param(sr_conv2_b_)), 1, 1);
  return ad::add(h, ad::upsample_bilinear2x(ad::slice(raw, 1, 0, 3)));
}

template <typename T>
GeneratorOutput<T> Generator::render(Bind<T>& bind, const ad::Var<T>& planes, const std::vector<render::CameraPose>& cams,
                                     std::optional<std::uint64_t> jitter_seed) {
  const auto& s = planes.shape();
  if (s.size() != 4 || s[0] != cams.size() || s[1] != 3 * cfg_.plane_channels) {
    throw ad::ShapeError("Generator::render", "planes " + ad::shape_str(s) + " for " + std::to_string(cams.size()) + " cameras");
  }
  const auto pv = triplane::split_planes(planes);
  render::Field<T> field = [&](const ad::Var<T>& pts) { return decode(bind, triplane::sample(pv, pts)); };
  const std::size_t k = cfg_.raw_channels();
  auto out = render::volume_render<T>(bind.tape(), field, cams, render::RenderSettings{cfg_.raw_res, cfg_.samples, jitter_seed},
                                      render::white_background<T>(k));
  GeneratorOutput<T> r;
  r.raw = ad::slice(out, 1, 0, k);
  r.opacity = ad::slice(out, 1, k, k + 1);
  r.image = super_resolve(bind, r.raw);
  return r;
}

void init_student_from_teacher(const Generator& teacher, Generator& student) {
  if (!(teacher.config() == student.config())) throw std::invalid_argument("init_student_from_teacher: generator configs differ");
  student.copy_weights_from(teacher);
}

void DiscriminatorConfig::validate() const {
  if (!is_pow2(resolution) || resolution < 8) throw std::invalid_argument("DiscriminatorConfig: resolution must be a power of two >= 8");
  if (base_channels == 0 || max_channels == 0 || hidden == 0 || pose_embed == 0 || mbstd_group == 0)
    throw std::invalid_argument("DiscriminatorConfig: zero channel count");
}

Discriminator::Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xd15c));
  std::size_t ch = cfg_.base_channels;
  convs_.push_back({add_param("conv0.weight", normal_init(ad::Shape{ch, 3, 3, 3}, rng)), add_param("conv0.bias", ad::Tensor<float>(ad::Shape{ch})), 1});
  std::size_t i = 1;
  for (std::size_t r = cfg_.resolution; r > 4; r /= 2, ++i) {
    const std::size_t next = std::min(2 * ch, cfg_.max_channels);
    const std::string name = "conv" + std::to_string(i);
    convs_.push_back({add_param(name + ".weight", normal_init(ad::Shape{next, ch, 3, 3}, rng)),
                      add_param(name + ".bias", ad::Tensor<float>(ad::Shape{next})), 2});
    ch = next;
  }
  flat_dim_ = (ch + 1) * 16;
  fc_w_ = add_param("fc.weight", normal_init(ad::Shape{cfg_.hidden, flat_dim_}, rng));
  fc_b_ = add_param("fc.bias", ad::Tensor<float>(ad::Shape{cfg_.hidden}));
  pose_w_ = add_param("pose.weight", normal_init(ad::Shape{cfg_.pose_embed, render::kPoseDim}, rng));
  pose_b_ = add_param("pose.bias", ad::Tensor<float>(ad::Shape{cfg_.pose_embed}));
  out_w_ = add_param("out.weight", normal_init(ad::Shape{1, cfg_.hidden + cfg_.pose_embed}, rng));
  out_b_ = add_param("out.bias", ad::Tensor<float>(ad::Shape{1}));
}

template <typename T>
ad::Var<T> Discriminator::forward(Bind<T>& bind, const ad::Var<T>& images, const ad::Tensor<float>& poses) {
  const auto& s = images.shape();
  const std::size_t r = cfg_.resolution;
  if (s.size() != 4 || s[1] != 3 || s[2] != r || s[3] != r) {
    throw ad::ShapeError("Discriminator", "expected [N, 3, " + std::to_string(r) + ", " + std::to_string(r) + "], got " + ad::shape_str(s));
  }
  const std::size_t n = s[0];
  if (poses.shape() != ad::Shape{n, render::kPoseDim}) throw ad::ShapeError("Discriminator", ad::Shape{n, render::kPoseDim}, poses.shape());
  auto x = ad::add_scalar(ad::scale(images, T(2)), T(-1));
  for (const auto& c : convs_) {
    const auto& wt = param(c.w).value;
    const double g = kLreluGain / std::sqrt(double(wt.dim(1) * 9));
    x = smooth_act(ad::conv2d(x, scaled(bind(param(c.w)), g), bind(param(c.b)), c.stride, 1));
  }
  x = ad::concat<T>({x, minibatch_stddev(x, cfg_.mbstd_group)}, 1);
  auto h = smooth_act(ad::linear(ad::reshape(x, ad::Shape{n, flat_dim_}), scaled(bind(param(fc_w_)), kLreluGain / std::sqrt(double(flat_dim_))),
                                bind(param(fc_b_))));
  auto e = smooth_act(ad::linear(bind.tape().constant(poses.template cast<T>()), scaled(bind(param(pose_w_)), kLreluGain / 2.0),
                                bind(param(pose_b_))));
  auto out = ad::linear(ad::concat<T>({h, e}, 1), scaled(bind(param(out_w_)), 1.0 / std::sqrt(double(cfg_.hidden + cfg_.pose_embed))),
                        bind(param(out_b_)));
  return ad::reshape(out, ad::Shape{n});
}

FixedEncoder::FixedEncoder() {
  Rng rng(kSeed);
  std::size_t in = 3;
  for (std::size_t i = 0; i < kStages; ++i) {
    const std::size_t out = kChannels[i];
    add_param("stage" + std::to_string(i) + ".weight", uniform_init(ad::Shape{out, in, 3, 3}, rng, std::sqrt(6.0 / double(in * 9))));
    add_param("stage" + std::to_string(i) + ".bias", ad::Tensor<float>(ad::Shape{out}));
    in = out;
  }
}

template <typename T>
std::vector<ad::Var<T>> FixedEncoder::stages(ad::Tape<T>& tape, const ad::Var<T>& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != s[3] || !is_pow2(s[2]) || s[2] < 32) {
    throw ad::ShapeError("FixedEncoder", "expected [N, 3, H, H] with H a power of two >= 32, got " + ad::shape_str(s));
  }
  // Inverted so the white background maps to zero activation.
  auto x = ad::add_scalar(ad::scale(images, T(-1)), T(1));
  std::vector<ad::Var<T>> out;
  for (std::size_t i = 0; i < kStages; ++i) {
    auto w = tape.constant(param(2 * i).value.template cast<T>());
    auto b = tape.constant(param(2 * i + 1).value.template cast<T>());
    x = ad::avg_pool2x(ad::leaky_relu(ad::conv2d(x, w, b, 1, 1), T(0.2)));
    out.push_back(x);
  }
  return out;
}

ad::Tensor<float> FixedEncoder::embed(const ad::Tensor<float>& images) const {
  ad::Tape<float> tape;
  auto x = stages(tape, tape.constant(images)).back();
  while (x.shape()[2] > kEmbedGrid) x = ad::avg_pool2x(x);
  const std::size_t n = images.dim(0);
  ad::Tensor<float> e = x.value().reshaped(ad::Shape{n, kEmbedDim});
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0;
    for (std::size_t k = 0; k < kEmbedDim; ++k) ss += double(e[i * kEmbedDim + k]) * e[i * kEmbedDim + k];
    const double inv = ss > 0 ? 1.0 / std::sqrt(ss) : 0.0;
    for (std::size_t k = 0; k < kEmbedDim; ++k) e[i * kEmbedDim + k] = static_cast<float>(e[i * kEmbedDim + k] * inv);
  }
  return e;
}

double FixedEncoder::similarity(const ad::Tensor<float>& a, std::size_t i, const ad::Tensor<float>& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  if (b.dim(1) != d) throw ad::ShapeError("FixedEncoder::similarity", a.shape(), b.shape());
  double dot = 0;
  for (std::size_t k = 0; k < d; ++k) dot += double(a[i * d + k]) * b[j * d + k];
  return dot;
}

#define TPD_INSTANTIATE(T)                                                                                          \
  template ad::Var<T> Generator::map(Bind<T>&, const ad::Tensor<float>&, const std::vector<render::CameraPose>&);   \
  template ad::Var<T> Generator::synthesize(Bind<T>&, const ad::Var<T>&);                                           \
  template std::pair<ad::Var<T>, ad::Var<T>> Generator::decode(Bind<T>&, const ad::Var<T>&);                        \
  template ad::Var<T> Generator::super_resolve(Bind<T>&, const ad::Var<T>&);                                        \
  template GeneratorOutput<T> Generator::render(Bind<T>&, const ad::Var<T>&, const std::vector<render::CameraPose>&, \
                                                std::optional<std::uint64_t>);                                      \
  template ad::Var<T> Discriminator::forward(Bind<T>&, const ad::Var<T>&, const ad::Tensor<float>&);                \
  template std::vector<ad::Var<T>> FixedEncoder::stages(ad::Tape<T>&, const ad::Var<T>&) const;

TPD_INSTANTIATE(float)
TPD_INSTANTIATE(double)

#undef TPD_INSTANTIATE

}  // namespace tpd::nn
