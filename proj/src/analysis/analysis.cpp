// SPDX-License-Identifier: Apache-2.0
#include "tpd/analysis/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace tpd::analysis {
namespace {

constexpr std::size_t kChunk = 8;

// Rows [begin, end) of a batch tensor.
ad::Tensor<float> rows(const ad::Tensor<float>& t, std::size_t begin, std::size_t end) {
  const std::size_t per = t.size() / t.dim(0);
  ad::Shape s = t.shape();
  s[0] = end - begin;
  return ad::Tensor<float>(s, std::vector<float>(t.ptr() + begin * per, t.ptr() + end * per));
}

ad::Tensor<float> concat_rows(const std::vector<ad::Tensor<float>>& parts) {
  ad::Shape s = parts.at(0).shape();
  s[0] = 0;
  std::vector<float> v;
  for (const auto& p : parts) {
    s[0] += p.dim(0);
    v.insert(v.end(), p.data().begin(), p.data().end());
  }
  return ad::Tensor<float>(s, std::move(v));
}

ad::Tensor<float> row(const ad::Tensor<float>& t, std::size_t i) { return rows(t, i, i + 1); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

double mean_abs_diff(const ad::Tensor<float>& a, const ad::Tensor<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return s / double(a.size());
}

const nn::FixedEncoder& encoder() {
  static const nn::FixedEncoder enc;
  return enc;
}

}  // namespace

render::CameraPose frontal_pose() { return render::CameraPose{}; }

render::CameraPose back_pose() {
  render::CameraPose p;
  p.yaw = render::kPi;
  return p;
}

ad::Tensor<float> latents(std::uint64_t seed, std::size_t n, std::size_t dim) {
  Rng rng(seed);
  ad::Tensor<float> z(ad::Shape{n, dim});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(rng.normal());
  return z;
}

ad::Tensor<float> styles(nn::Generator& g, const ad::Tensor<float>& z, const render::CameraPose& cond) {
  ad::Tape<float> tape;
  nn::Bind<float> b(tape, ad::Mode::kFrozen);
  return g.map(b, z, std::vector<render::CameraPose>(z.dim(0), cond)).value();
}

ad::Tensor<float> planes(nn::Generator& g, const ad::Tensor<float>& w) {
  std::vector<ad::Tensor<float>> out;
  for (std::size_t i = 0; i < w.dim(0); i += kChunk) {
    ad::Tape<float> tape;
    nn::Bind<float> b(tape, ad::Mode::kFrozen);
    out.push_back(g.synthesize(b, tape.constant(rows(w, i, std::min(w.dim(0), i + kChunk)))).value());
  }
  return concat_rows(out);
}

ad::Tensor<float> planes_from_z(nn::Generator& g, const ad::Tensor<float>& z) { return planes(g, styles(g, z)); }

Renders render(nn::Generator& g, const ad::Tensor<float>& p, const render::CameraPose& cam) {
  std::vector<ad::Tensor<float>> images, opacity;
  for (std::size_t i = 0; i < p.dim(0); i += kChunk) {
    const std::size_t end = std::min(p.dim(0), i + kChunk);
    ad::Tape<float> tape;
    nn::Bind<float> b(tape, ad::Mode::kFrozen);
    const auto out = g.render(b, tape.constant(rows(p, i, end)), std::vector<render::CameraPose>(end - i, cam), std::nullopt);
    images.push_back(out.image.value());
    opacity.push_back(out.opacity.value());
  }
  return {concat_rows(images), concat_rows(opacity)};
}

ad::Tensor<float> swap_planes(const ad::Tensor<float>& dst, const ad::Tensor<float>& src, triplane::Plane plane) {
  if (dst.shape() != src.shape() || dst.rank() != 4 || dst.dim(1) % 3 != 0) {
    throw ad::ShapeError("swap_planes", dst.shape(), src.shape());
  }
  ad::Tensor<float> out = dst;
  const std::size_t n = dst.dim(0), per = dst.size() / n, plane_size = per / 3;
  const std::size_t off = static_cast<std::size_t>(plane) * plane_size;
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(src.ptr() + i * per + off, plane_size, out.ptr() + i * per + off);
  return out;
}

// ---------------------------------------------------------------------------

const SwapRow& SwapReport::row(const std::string& label) const {
  for (const auto& r : rows)
    if (r.label == label) return r;
  throw std::out_of_range("SwapReport: no row " + label);
}

std::string SwapReport::text() const {
  std::ostringstream os;
  os << "identities " << identities << ", unordered pairs " << pairs << ", self-similarity " << fmt(self_similarity)
     << "\n";
  os << "swapped   sim(original)  sim(donor)  closer-to-original  closer-to-donor\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-8s  %13.6f  %10.6f  %17.1f%%  %14.1f%%\n", r.label.c_str(), r.sim_original,
                  r.sim_donor, 100 * r.original_fraction(), 100 * r.donor_fraction());
    os << buf;
  }
  return os.str();
}

std::string SwapReport::csv() const {
  std::ostringstream os;
  os << "plane,pairs,sim_original,sim_donor,frac_original,frac_donor,self_similarity\n";
  for (const auto& r : rows)
    os << r.label << ',' << r.pairs << ',' << fmt(r.sim_original) << ',' << fmt(r.sim_donor) << ','
       << fmt(r.original_fraction()) << ',' << fmt(r.donor_fraction()) << ',' << fmt(self_similarity) << '\n';
  return os.str();
}

SwapReport swap_experiment(nn::Generator& a, nn::Generator* b, std::size_t identities, std::uint64_t seed,
                           const std::vector<triplane::Plane>& plane_set) {
  if (identities < 2) throw std::invalid_argument("swap_experiment: need at least 2 identities");
  nn::Generator& donor_gen = b ? *b : a;
  if (b && !(a.config() == b->config())) throw std::invalid_argument("swap_experiment: generator architectures differ");
  const auto z = latents(seed, identities, a.config().z_dim);
  const auto pa = planes_from_z(a, z);
  const auto pb = b ? planes_from_z(*b, latents(seed + 1, identities, a.config().z_dim)) : pa;
  const auto front = frontal_pose();
  const auto ea = encoder().embed(render(a, pa, front).images);
  const auto eb = b ? encoder().embed(render(donor_gen, pb, front).images) : ea;

  SwapReport rep;
  rep.identities = identities;
  for (std::size_t i = 0; i < identities; ++i) rep.self_similarity += nn::FixedEncoder::similarity(ea, i, ea, i);
  rep.self_similarity /= double(identities);

  std::vector<std::size_t> recv, donor;
  for (std::size_t i = 0; i < identities; ++i)
    for (std::size_t j = i + 1; j < identities; ++j) {
      recv.push_back(i);
      donor.push_back(j);
    }
  rep.pairs = recv.size();
  std::vector<ad::Tensor<float>> dst_parts, src_parts;
  for (std::size_t k = 0; k < rep.pairs; ++k) {
    dst_parts.push_back(row(pa, recv[k]));
    src_parts.push_back(row(pb, donor[k]));
  }
  const auto dst = concat_rows(dst_parts), src = concat_rows(src_parts);

  auto score = [&](const std::string& label, const ad::Tensor<float>& swapped) {
    const auto e = encoder().embed(render(a, swapped, front).images);
    SwapRow r;
    r.label = label;
    r.pairs = rep.pairs;
    for (std::size_t k = 0; k < rep.pairs; ++k) {
      const double so = nn::FixedEncoder::similarity(e, k, ea, recv[k]);
      const double sd = nn::FixedEncoder::similarity(e, k, eb, donor[k]);
      r.sim_original += so;
      r.sim_donor += sd;
      r.toward_donor += sd > so;
    }
    r.sim_original /= double(rep.pairs);
    r.sim_donor /= double(rep.pairs);
    rep.rows.push_back(r);
  };
  score("none", dst);
  for (auto p : plane_set) score(triplane::plane_name(p), swap_planes(dst, src, p));
  return rep;
}

// ---------------------------------------------------------------------------

std::string CrossSwapReport::text() const {
  std::ostringstream os;
  os << "pairs " << pairs << "\n"
     << "back-view opacity change (mean abs) " << fmt(back_opacity_change) << "\n"
     << "frontal similarity to face: before " << fmt(sim_before) << ", after " << fmt(sim_after) << ", shifted in "
     << shifted << "/" << pairs << " pairs\n";
  return os.str();
}

std::string CrossSwapReport::csv() const {
  std::ostringstream os;
  os << "pairs,back_opacity_change,sim_before,sim_after,shifted\n"
     << pairs << ',' << fmt(back_opacity_change) << ',' << fmt(sim_before) << ',' << fmt(sim_after) << ',' << shifted
     << '\n';
  return os.str();
}

CrossSwapReport cross_model_swap(nn::Generator& face, nn::Generator& head, std::size_t pairs, std::uint64_t seed) {
  if (pairs < 1) throw std::invalid_argument("cross_model_swap: need at least 1 pair");
  if (!(face.config() == head.config())) throw std::invalid_argument("cross_model_swap: generator architectures differ");
  const auto z = latents(seed, pairs, face.config().z_dim);
  const auto pf = planes_from_z(face, z), ph = planes_from_z(head, z);
  const auto swapped = swap_planes(ph, pf, triplane::Plane::kXY);

  const auto face_front = render(face, pf, frontal_pose());
  const auto head_front = render(head, ph, frontal_pose());
  const auto swap_front = render(head, swapped, frontal_pose());
  const auto head_back = render(head, ph, back_pose());
  const auto swap_back = render(head, swapped, back_pose());

  const auto ef = encoder().embed(face_front.images), eh = encoder().embed(head_front.images),
             es = encoder().embed(swap_front.images);
  CrossSwapReport rep;
  rep.pairs = pairs;
  rep.back_opacity_change = mean_abs_diff(head_back.opacity, swap_back.opacity);
  for (std::size_t i = 0; i < pairs; ++i) {
    const double before = nn::FixedEncoder::similarity(eh, i, ef, i), after = nn::FixedEncoder::similarity(es, i, ef, i);
    rep.sim_before += before;
    rep.sim_after += after;
    rep.shifted += after > before;
  }
  rep.sim_before /= double(pairs);
  rep.sim_after /= double(pairs);
  for (const auto* r : {&face_front, &head_front, &swap_front, &head_back, &swap_back})
    for (auto& img : unbatch(r->images)) rep.grid.push_back(std::move(img));
  return rep;
}

Renders swap_only_render(nn::Generator& face, nn::Generator& head, const ad::Tensor<float>& z,
                         const render::CameraPose& cam) {
  if (!(face.config() == head.config())) throw std::invalid_argument("swap_only_render: generator architectures differ");
  return render(head, swap_planes(planes_from_z(head, z), planes_from_z(face, z), triplane::Plane::kXY), cam);
}

ad::Tensor<float> interpolate(nn::Generator& g, const ad::Tensor<float>& z1, const ad::Tensor<float>& z2,
                              std::size_t steps, const render::CameraPose& pose) {
  if (steps < 2) throw std::invalid_argument("interpolate: steps must be >= 2");
  const std::size_t dz = g.config().z_dim;
  if (z1.size() != dz || z2.size() != dz) throw std::invalid_argument("interpolate: latent size must equal z_dim");
  // One sample per pass so each endpoint matches a single-sample render bit-exactly.
  const auto w1 = styles(g, z1.reshaped(ad::Shape{1, dz})), w2 = styles(g, z2.reshaped(ad::Shape{1, dz}));
  const std::size_t dw = w1.size();
  std::vector<ad::Tensor<float>> frames;
  for (std::size_t k = 0; k < steps; ++k) {
    const double a = double(k) / double(steps - 1);
    ad::Tensor<float> w = k == 0 ? w1 : w2;
    if (k != 0 && k + 1 != steps)
      for (std::size_t j = 0; j < dw; ++j) w[j] = static_cast<float>((1 - a) * w1[j] + a * w2[j]);
    frames.push_back(render(g, planes(g, w), pose).images);
  }
  return concat_rows(frames);
}

// ---------------------------------------------------------------------------

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps) {
  if (a.cols() != b.cols()) throw std::invalid_argument("frechet_distance: dimension mismatch");
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("frechet_distance: need at least 2 samples per set");
  auto moments = [eps](const Eigen::MatrixXd& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    Eigen::MatrixXd cov = (c.transpose() * c) / double(x.rows() - 1);
    cov.diagonal().array() += eps;
    return std::pair{mu, cov};
  };
  const auto [mu1, s1] = moments(a);
  const auto [mu2, s2] = moments(b);

  // tr((s1 s2)^1/2) = tr((r s2 r)^1/2) with r = s1^1/2; the inner product is symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  const Eigen::VectorXd l1 = e1.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd r = e1.eigenvectors() * l1.asDiagonal() * e1.eigenvectors().transpose();
  Eigen::MatrixXd m = r * s2 * r;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

Eigen::MatrixXd embeddings(const ad::Tensor<float>& images) {
  Eigen::MatrixXd out(images.dim(0), nn::FixedEncoder::kEmbedDim);
  for (std::size_t i = 0; i < images.dim(0); i += kChunk) {
    const std::size_t end = std::min(images.dim(0), i + kChunk);
    const auto e = encoder().embed(rows(images, i, end));
    for (std::size_t r = i; r < end; ++r)
      for (std::size_t k = 0; k < nn::FixedEncoder::kEmbedDim; ++k) out(r, k) = e[(r - i) * nn::FixedEncoder::kEmbedDim + k];
  }
  return out;
}

std::string MetricsReport::text() const {
  std::ostringstream os;
  os << "samples " << samples << "\nfeature distance " << fmt(feature_distance) << "\n";
  if (has_identity) os << "identity consistency " << fmt(identity_consistency) << "\n";
  return os.str();
}

std::string MetricsReport::csv() const {
  std::ostringstream os;
  os << "samples,feature_distance,identity_consistency\n"
     << samples << ',' << fmt(feature_distance) << ',' << (has_identity ? fmt(identity_consistency) : "") << '\n';
  return os.str();
}

MetricsReport feature_distance(const ad::Tensor<float>& images_a, const ad::Tensor<float>& images_b) {
  MetricsReport rep;
  rep.samples = std::min(images_a.dim(0), images_b.dim(0));
  rep.feature_distance = frechet_distance(embeddings(images_a), embeddings(images_b));
  return rep;
}

MetricsReport eval_feature_distance(nn::Generator& g, const data::ImageSet& real, std::size_t n, std::uint64_t seed,
                                    nn::Generator* teacher) {
  n = std::min(n, real.size());
  if (n < 2) throw std::invalid_argument("eval_feature_distance: need at least 2 samples");
  if (real.resolution() != g.config().image_res()) {
    throw std::invalid_argument("eval_feature_distance: real images are " + std::to_string(real.resolution()) +
                                "px, generator renders " + std::to_string(g.config().image_res()) + "px");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const auto z = latents(seed, n, g.config().z_dim);
  std::vector<ad::Tensor<float>> fake;
  for (std::size_t i = 0; i < n; ++i) {
    const auto zi = row(z, i);
    fake.push_back(render(g, planes(g, styles(g, zi, real.poses[i])), real.poses[i]).images);
  }
  auto rep = feature_distance(concat_rows(fake), real.gather(idx));
  if (teacher) {
    rep.has_identity = true;
    rep.identity_consistency = identity_consistency(g, *teacher, n, seed);
  }
  return rep;
}

double identity_consistency(nn::Generator& g, nn::Generator& reference, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("identity_consistency: n must be >= 1");
  const auto z = latents(seed, n, g.config().z_dim);
  const auto eg = encoder().embed(render(g, planes_from_z(g, z), frontal_pose()).images);
  const auto er = encoder().embed(render(reference, planes_from_z(reference, z), frontal_pose()).images);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += nn::FixedEncoder::similarity(eg, i, er, i);
  return s / double(n);
}

// ---------------------------------------------------------------------------

std::vector<ad::Tensor<float>> unbatch(const ad::Tensor<float>& batch) {
  std::vector<ad::Tensor<float>> out;
  ad::Shape s(batch.shape().begin() + 1, batch.shape().end());
  for (std::size_t i = 0; i < batch.dim(0); ++i) out.push_back(row(batch, i).reshaped(s));
  return out;
}

ad::Tensor<float> tile(const std::vector<ad::Tensor<float>>& images, std::size_t rows_, std::size_t cols) {
  if (images.empty()) throw std::invalid_argument("tile: no images");
  if (rows_ * cols < images.size()) {
    throw std::invalid_argument("tile: " + std::to_string(images.size()) + " images do not fit a " +
                                std::to_string(rows_) + "x" + std::to_string(cols) + " grid");
  }
  const std::size_t h = images[0].dim(1), w = images[0].dim(2);
  ad::Tensor<float> out(ad::Shape{3, rows_ * h, cols * w});
  std::fill(out.ptr(), out.ptr() + out.size(), 1.0f);
  const std::size_t W = cols * w, H = rows_ * h;
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto& im = images[k];
    if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) != h || im.dim(2) != w) {
      throw ad::ShapeError("tile", images[0].shape(), im.shape());
    }
    const std::size_t r0 = (k / cols) * h, c0 = (k % cols) * w;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(im.ptr() + (c * h + y) * w, w, out.ptr() + (c * H + r0 + y) * W + c0);
  }
  return out;
}

void emit_grid(const std::vector<ad::Tensor<float>>& images, std::size_t rows_, std::size_t cols,
               const std::filesystem::path& path) {
  data::write_png(path, tile(images, rows_, cols));
}

}  // namespace tpd::analysis
