// SPDX-License-Identifier: Apache-2.0
#include "tpd/dataset/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "tpd/core/rng.hpp"

namespace tpd::data {
namespace {

using render::kPi;
using render::Vec3;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

Color jitter(Rng& rng, Color c, double amount) {
  for (auto& v : c) v = std::clamp(v + rng.uniform(-amount, amount), 0.0, 1.0);
  return c;
}

/// Entry and exit distances of a ray with an origin-centred ellipsoid.
std::optional<std::pair<double, double>> hit_ellipsoid(const Vec3& o, const Vec3& d, const Vec3& r) {
  const Vec3 os{o[0] / r[0], o[1] / r[1], o[2] / r[2]};
  const Vec3 ds{d[0] / r[0], d[1] / r[1], d[2] / r[2]};
  const double a = dot(ds, ds), b = 2.0 * dot(os, ds), c = dot(os, os) - 1.0;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  return std::pair{(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)};
}

const Vec3 kHairAxis = normalized({0.0, 0.5, -1.0});
const Vec3 kLightFront = normalized({0.0, 0.6, 1.0});
const Vec3 kLightBack = normalized({0.0, 0.6, -1.0});

double angle_between(const Vec3& a, const Vec3& b) { return std::acos(std::clamp(dot(a, b), -1.0, 1.0)); }

bool in_hair(const SceneSpec& s, const Vec3& q) { return angle_between(q, kHairAxis) < s.hair_extent; }

bool in_band(const SceneSpec& s, const Vec3& p) {
  return s.accessory && std::abs(p[1] / s.radii[1] - s.band_height) < s.band_width;
}

Color surface_color(const SceneSpec& s, const Vec3& p, bool on_shell) {
  if (in_band(s, p)) return s.band;
  if (on_shell) return s.hair;
  const Vec3 q = normalized({p[0] / s.radii[0], p[1] / s.radii[1], p[2] / s.radii[2]});
  if (in_hair(s, q)) return s.hair;
  for (double side : {-1.0, 1.0}) {
    const Vec3 eye{side * std::sin(s.eye_spread) * std::cos(s.eye_height), std::sin(s.eye_height),
                   std::cos(s.eye_spread) * std::cos(s.eye_height)};
    const double ang = angle_between(q, eye);
    if (ang < 0.45 * s.eye_size) return s.pupil;
    if (ang < s.eye_size) return s.iris;
  }
  const double el = std::asin(std::clamp(q[1], -1.0, 1.0)), az = std::atan2(q[0], q[2]);
  if (std::abs(el - s.mouth_height) < 0.07 && std::abs(az) < s.mouth_width) return s.mouth;
  return s.skin;
}

Color shade(const Color& c, const Vec3& p, const Vec3& radii) {
  const Vec3 n = normalized({p[0] / (radii[0] * radii[0]), p[1] / (radii[1] * radii[1]), p[2] / (radii[2] * radii[2])});
  const double k = std::min(1.0, 0.3 + 0.45 * std::max(0.0, dot(n, kLightFront)) + 0.45 * std::max(0.0, dot(n, kLightBack)));
  return {c[0] * k, c[1] * k, c[2] * k};
}

}  // namespace

SceneSpec synth_scene(std::uint64_t id_seed, double accessory_prob) {
  Rng rng(mix_seed(id_seed, 0x5ce9e));
  SceneSpec s;
  s.id_seed = id_seed;
  s.radii = {rng.uniform(0.26, 0.34), rng.uniform(0.30, 0.38), rng.uniform(0.27, 0.35)};
  const double tone = rng.uniform();
  const Color light{0.96, 0.82, 0.72}, dark{0.42, 0.28, 0.2};
  for (std::size_t k = 0; k < 3; ++k) s.skin[k] = light[k] + tone * (dark[k] - light[k]);
  s.skin = jitter(rng, s.skin, 0.06);
  s.eye_spread = rng.uniform(0.25, 0.5);
  s.eye_height = rng.uniform(0.05, 0.3);
  s.eye_size = rng.uniform(0.12, 0.22);
  s.iris = {rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)};
  s.pupil = jitter(rng, {0.05, 0.05, 0.08}, 0.04);
  s.mouth_height = rng.uniform(-0.55, -0.3);
  s.mouth_width = rng.uniform(0.15, 0.4);
  s.mouth = jitter(rng, {0.65, 0.22, 0.25}, 0.12);
  s.hair_extent = rng.uniform(1.5, 1.85);
  s.hair_thickness = rng.uniform(1.04, 1.15);
  static constexpr std::array<Color, 4> kHair{{{0.08, 0.06, 0.05}, {0.3, 0.18, 0.08}, {0.85, 0.7, 0.35}, {0.6, 0.25, 0.1}}};
  s.hair = jitter(rng, kHair[rng.below(kHair.size())], 0.05);
  const bool acc = rng.bernoulli(accessory_prob);
  s.band_height = rng.uniform(0.0, 0.35);
  s.band_width = rng.uniform(0.04, 0.09);
  s.band = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
  s.accessory = acc;
  return s;
}

Color trace_ray(const SceneSpec& s, const Vec3& o, const Vec3& d) {
  double best = std::numeric_limits<double>::infinity();
  Vec3 best_p{};
  bool shell = false;
  if (auto h = hit_ellipsoid(o, d, s.radii); h && h->first > 0.0) {
    best = h->first;
  }
  const Vec3 hr{s.radii[0] * s.hair_thickness, s.radii[1] * s.hair_thickness, s.radii[2] * s.hair_thickness};
  if (auto h = hit_ellipsoid(o, d, hr)) {
    for (double t : {h->first, h->second}) {
      if (t <= 0.0 || t >= best) continue;
      const Vec3 p{o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]};
      if (in_hair(s, normalized({p[0] / hr[0], p[1] / hr[1], p[2] / hr[2]}))) {
        best = t;
        shell = true;
        break;
      }
    }
  }
  if (!std::isfinite(best)) return {1.0, 1.0, 1.0};
  best_p = {o[0] + best * d[0], o[1] + best * d[1], o[2] + best * d[2]};
  return shade(surface_color(s, best_p, shell), best_p, shell ? hr : s.radii);
}

ad::Tensor<double> reference_render(const SceneSpec& scene, const render::CameraPose& cam, std::size_t res,
                                    std::size_t supersample) {
  if (res == 0 || supersample == 0) throw std::invalid_argument("reference_render: res and supersample must be positive");
  ad::Tensor<double> img(ad::Shape{3, res, res});
  const double inv = 1.0 / static_cast<double>(supersample * supersample);
  for (std::size_t i = 0; i < res; ++i) {
    for (std::size_t j = 0; j < res; ++j) {
      Color acc{0, 0, 0};
      for (std::size_t a = 0; a < supersample; ++a) {
        for (std::size_t b = 0; b < supersample; ++b) {
          const double row = double(i) + (double(a) + 0.5) / double(supersample);
          const double col = double(j) + (double(b) + 0.5) / double(supersample);
          const auto ray = render::pixel_ray(cam, res, col, row);
          const Color c = trace_ray(scene, ray.origin, ray.dir);
          for (std::size_t k = 0; k < 3; ++k) acc[k] += c[k];
        }
      }
      for (std::size_t k = 0; k < 3; ++k) img[(k * res + i) * res + j] = acc[k] * inv;
    }
  }
  return img;
}

ad::Tensor<float> quantize(const ad::Tensor<double>& image) {
  ad::Tensor<float> out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = static_cast<float>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0)) / 255.0f;
  return out;
}

const char* split_name(Split s) { return s == Split::kFace ? "faces" : "heads"; }

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [s](const auto& r) { return r.split == s; }));
}

std::size_t DatasetManifest::count(Split s, render::ViewTag t) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [s, t](const auto& r) { return r.split == s && r.tag == t; }));
}

void DatasetManifest::write(const std::filesystem::path& file) const {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write manifest " + file.string());
  os << "# tpd-dataset 1\n";
  os << "# seed " << options.seed << " faces " << options.faces << " heads " << options.heads << " views " << options.views
     << " res " << options.res << " accessory_prob " << options.accessory_prob << "\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s %.17g %.17g %.17g %s %llu\n", r.path.c_str(), r.pose.yaw, r.pose.pitch, r.pose.radius,
                  render::view_tag_name(r.tag), static_cast<unsigned long long>(r.id));
    os << buf;
  }
  if (!os) throw std::runtime_error("failed writing manifest " + file.string());
}

DatasetManifest DatasetManifest::read(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read manifest " + file.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key;
      ls >> hash >> key;
      if (key != "seed") continue;
      std::string k2;
      ls >> m.options.seed >> k2 >> m.options.faces >> k2 >> m.options.heads >> k2 >> m.options.views >> k2 >> m.options.res >> k2 >>
          m.options.accessory_prob;
      if (!ls) throw std::runtime_error("manifest header malformed at line " + std::to_string(lineno));
      continue;
    }
    DatasetRecord r;
    std::string tag;
    unsigned long long id = 0;
    ls >> r.path >> r.pose.yaw >> r.pose.pitch >> r.pose.radius >> tag >> id;
    if (!ls) throw std::runtime_error("manifest record malformed at line " + std::to_string(lineno));
    const auto t = render::parse_view_tag(tag);
    if (!t) throw std::runtime_error("manifest: unknown view tag '" + tag + "' at line " + std::to_string(lineno));
    r.tag = *t;
    if (r.tag != render::classify_view(r.pose)) throw std::runtime_error("manifest: tag disagrees with pose at line " + std::to_string(lineno));
    r.id = id;
    if (r.path.rfind("faces/", 0) == 0) {
      r.split = Split::kFace;
    } else if (r.path.rfind("heads/", 0) == 0) {
      r.split = Split::kHead;
    } else {
      throw std::runtime_error("manifest: record outside faces/ and heads/ at line " + std::to_string(lineno));
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

std::uint64_t face_identity(std::uint64_t seed, std::size_t i) { return mix_seed(mix_seed(seed, 0xfacef), i); }
std::uint64_t head_identity(std::uint64_t seed, std::size_t k) { return mix_seed(mix_seed(seed, 0x4ead5), k); }

render::CameraPose face_pose(std::uint64_t seed, std::size_t i) {
  Rng rng(mix_seed(mix_seed(seed, 0xf05e), i));
  render::CameraPose p;
  p.yaw = rng.uniform(-kPi / 4, kPi / 4);
  p.pitch = rng.uniform(-kPi / 8, kPi / 8);
  return p;
}

render::CameraPose head_view_pose(std::uint64_t seed, std::uint64_t identity, std::size_t k, std::size_t views) {
  Rng rng(mix_seed(mix_seed(seed, identity), k));
  render::CameraPose p;
  // Quarter-step offset: the sweep lands near 0 and pi and splits evenly into front and back for views % 4 == 0.
  p.yaw = render::wrap_angle((static_cast<double>(k) + 0.25) * 2.0 * kPi / static_cast<double>(views));
  p.pitch = rng.uniform(-kPi / 16, kPi / 16);
  return p;
}

namespace {

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

DatasetRecord emit(const std::filesystem::path& root, const std::string& rel, const SceneSpec& scene, const render::CameraPose& pose,
                   std::size_t res, Split split) {
  write_png(root / rel, quantize(reference_render(scene, pose, res)));
  return DatasetRecord{rel, pose, render::classify_view(pose), scene.id_seed, split};
}

}  // namespace

std::vector<DatasetRecord> build_face_dataset(const GenOptions& opt, const std::filesystem::path& root) {
  if (opt.faces == 0) throw std::invalid_argument("build_face_dataset: need at least one identity");
  ensure_dir(root / "faces");
  std::vector<DatasetRecord> out;
  char name[64];
  for (std::size_t i = 0; i < opt.faces; ++i) {
    std::snprintf(name, sizeof name, "faces/f%05zu.png", i);
    out.push_back(emit(root, name, synth_scene(face_identity(opt.seed, i), opt.accessory_prob), face_pose(opt.seed, i), opt.res, Split::kFace));
  }
  return out;
}

std::vector<DatasetRecord> build_head_dataset(const GenOptions& opt, const std::filesystem::path& root) {
  if (opt.heads == 0 || opt.views == 0) throw std::invalid_argument("build_head_dataset: need identities and views");
  ensure_dir(root / "heads");
  std::vector<DatasetRecord> out;
  char name[64];
  for (std::size_t k = 0; k < opt.heads; ++k) {
    const auto scene = synth_scene(head_identity(opt.seed, k), opt.accessory_prob);
    for (std::size_t v = 0; v < opt.views; ++v) {
      std::snprintf(name, sizeof name, "heads/h%03zu_v%02zu.png", k, v);
      out.push_back(emit(root, name, scene, head_view_pose(opt.seed, scene.id_seed, v, opt.views), opt.res, Split::kHead));
    }
  }
  return out;
}

DatasetManifest generate(const GenOptions& opt, const std::filesystem::path& root) {
  ensure_dir(root);
  DatasetManifest m;
  m.options = opt;
  if (opt.faces > 0) m.records = build_face_dataset(opt, root);
  if (opt.heads > 0) {
    auto heads = build_head_dataset(opt, root);
    m.records.insert(m.records.end(), heads.begin(), heads.end());
  }
  m.write(root / "manifest.txt");
  return m;
}

ad::Tensor<float> ImageSet::gather(const std::vector<std::size_t>& idx) const {
  const std::size_t r = resolution(), per = 3 * r * r;
  ad::Tensor<float> out(ad::Shape{idx.size(), 3, r, r});
  for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(images.ptr() + idx[b] * per, per, out.ptr() + b * per);
  return out;
}

std::vector<std::size_t> ImageSet::indices(render::ViewTag t) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (tags[i] == t) out.push_back(i);
  return out;
}

ImageSet load_split(const std::filesystem::path& root, const DatasetManifest& manifest, Split split, std::size_t res) {
  ImageSet set;
  std::vector<float> pixels;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    auto img = read_png(root / r.path);
    if (img.dim(1) % res != 0) throw std::runtime_error("load_split: " + std::to_string(res) + " does not divide stored size " + std::to_string(img.dim(1)));
    img = box_downsample(img, img.dim(1) / res);
    pixels.insert(pixels.end(), img.data().begin(), img.data().end());
    set.poses.push_back(r.pose);
    set.tags.push_back(r.tag);
    set.ids.push_back(r.id);
  }
  if (set.poses.empty()) throw std::runtime_error(std::string("load_split: no records in split ") + split_name(split));
  set.images = ad::Tensor<float>(ad::Shape{set.poses.size(), 3, res, res}, std::move(pixels));
  return set;
}

void write_png(const std::filesystem::path& file, const ad::Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ad::ShapeError("write_png", "expected [3, H, W], got " + ad::shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> buf(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < 3; ++k)
      buf[i * 3 + k] = static_cast<unsigned char>(std::lround(std::clamp(double(image[k * h * w + i]), 0.0, 1.0) * 255.0));
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, file.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + file.string() + ": " + png.message);
  }
}

ad::Tensor<float> read_png(const std::filesystem::path& file) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, file.c_str())) throw std::runtime_error("cannot read PNG " + file.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    throw std::runtime_error("cannot decode PNG " + file.string() + ": " + png.message);
  }
  const std::size_t h = png.height, w = png.width;
  ad::Tensor<float> out(ad::Shape{3, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < 3; ++k) out[k * h * w + i] = static_cast<float>(buf[i * 3 + k]) / 255.0f;
  return out;
}

ad::Tensor<float> box_downsample(const ad::Tensor<float>& image, std::size_t factor) {
  if (factor == 1) return image;
  if (image.rank() != 3 || image.dim(1) % factor != 0 || image.dim(2) % factor != 0 || factor == 0) {
    throw ad::ShapeError("box_downsample", "cannot reduce " + ad::shape_str(image.shape()) + " by " + std::to_string(factor));
  }
  const std::size_t c = image.dim(0), h = image.dim(1) / factor, w = image.dim(2) / factor;
  ad::Tensor<float> out(ad::Shape{c, h, w});
  const double inv = 1.0 / double(factor * factor);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0;
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b) acc += image[(k * image.dim(1) + i * factor + a) * image.dim(2) + j * factor + b];
        out[(k * h + i) * w + j] = static_cast<float>(acc * inv);
      }
  return out;
}

}  // namespace tpd::data
