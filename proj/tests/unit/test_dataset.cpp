// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include "tpd/dataset/dataset.hpp"

namespace {

using namespace tpd;
using data::Color;

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tpd_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool same(const data::SceneSpec& a, const data::SceneSpec& b) {
  return a.radii == b.radii && a.skin == b.skin && a.iris == b.iris && a.eye_spread == b.eye_spread && a.eye_height == b.eye_height &&
         a.hair == b.hair && a.hair_extent == b.hair_extent && a.accessory == b.accessory && a.band == b.band;
}

// True when some pixel in columns [c0, c1) is k * c for a shading factor k in (0, 1].
bool shaded_copy_in(const ad::Tensor<double>& img, const Color& c, std::size_t c0, std::size_t c1) {
  const std::size_t h = img.dim(1), w = img.dim(2), n = h * w;
  const double cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = c0; j < c1; ++j) {
      const std::size_t q = i * w + j;
      const Color p{img[q], img[n + q], img[2 * n + q]};
      const double k = (p[0] * c[0] + p[1] * c[1] + p[2] * c[2]) / cc;
      if (k <= 0.0 || k > 1.0 + 1e-12) continue;
      if (std::abs(p[0] - k * c[0]) + std::abs(p[1] - k * c[1]) + std::abs(p[2] - k * c[2]) < 1e-9) return true;
    }
  return false;
}

// Without supersampling every pixel is a pure shaded surface colour.
ad::Tensor<double> sharp(const data::SceneSpec& s, const render::CameraPose& cam) { return data::reference_render(s, cam, 48, 1); }

bool contains_color(const data::SceneSpec& s, const render::CameraPose& cam, const Color& c) {
  return shaded_copy_in(sharp(s, cam), c, 0, 48);
}

TEST(Scene, DeterministicPerSeed) {
  EXPECT_TRUE(same(data::synth_scene(42), data::synth_scene(42)));
  EXPECT_FALSE(same(data::synth_scene(42), data::synth_scene(43)));
}

TEST(Scene, FiftySeedsAreDistinct) {
  std::set<std::tuple<Color, Color, double, double>> seen;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto sc = data::synth_scene(data::head_identity(0, s));
    seen.insert({sc.skin, sc.iris, sc.eye_spread, sc.eye_height});
  }
  EXPECT_EQ(seen.size(), 50u);
}

TEST(Scene, AccessoryRateMatchesProbability) {
  for (double p : {0.3, 0.7}) {
    std::size_t hits = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) hits += data::synth_scene(s, p).accessory;
    // Binomial(1000, p): 4 standard deviations.
    EXPECT_NEAR(double(hits) / 1000.0, p, 4.0 * std::sqrt(p * (1 - p) / 1000.0));
  }
}

TEST(Render, RaysAwayFromHeadAreWhite) {
  const auto s = data::synth_scene(7);
  for (const render::Vec3& d : {render::Vec3{0, 0, 1}, render::Vec3{0.6, 0, 0.8}, render::Vec3{0, 1, 0}}) {
    EXPECT_EQ(data::trace_ray(s, {0, 0, 2.7}, d), (Color{1, 1, 1}));
  }
  // Camera whose whole frustum misses: a head shrunk far below one pixel.
  auto tiny = s;
  tiny.radii = {1e-6, 1e-6, 1e-6};
  const auto img = data::reference_render(tiny, render::CameraPose{}, 16);
  for (double v : img.data()) EXPECT_EQ(v, 1.0);
}

TEST(Render, FrontShowsEyesBackShowsHair) {
  for (std::uint64_t id = 0; id < 5; ++id) {
    auto s = data::synth_scene(data::head_identity(3, id), 0.0);
    render::CameraPose front{}, back{};
    back.yaw = render::kPi;
    const auto img = sharp(s, front);
    EXPECT_TRUE(shaded_copy_in(img, s.iris, 0, 24)) << id;
    EXPECT_TRUE(shaded_copy_in(img, s.iris, 24, 48)) << id;
    EXPECT_TRUE(contains_color(s, front, s.pupil)) << id;
    EXPECT_TRUE(contains_color(s, front, s.skin)) << id;
    EXPECT_FALSE(contains_color(s, back, s.iris)) << id;
    EXPECT_FALSE(contains_color(s, back, s.pupil)) << id;
    EXPECT_TRUE(contains_color(s, back, s.hair)) << id;
  }
}

TEST(Render, MirrorCamerasGiveMirroredImages) {
  const auto s = data::synth_scene(11, 1.0);
  for (double yaw : {0.3, 1.2, 2.5}) {
    render::CameraPose l{}, r{};
    l.yaw = yaw;
    r.yaw = -yaw;
    l.pitch = r.pitch = 0.1;
    const std::size_t n = 24;
    const auto a = data::reference_render(s, l, n), b = data::reference_render(s, r, n);
    double worst = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(a[(c * n + i) * n + j] - b[(c * n + i) * n + (n - 1 - j)]));
    EXPECT_LT(worst, 1e-6) << yaw;
  }
}

TEST(Dataset, GenerationCountsAndTags) {
  data::GenOptions opt;
  opt.faces = 6;
  opt.heads = 3;
  opt.views = 16;
  opt.res = 16;
  opt.seed = 5;
  const auto root = temp_dir("gen");
  const auto m = data::generate(opt, root);
  EXPECT_EQ(m.count(data::Split::kFace), 6u);
  EXPECT_EQ(m.count(data::Split::kFace, render::ViewTag::kFront), 6u);
  EXPECT_EQ(m.count(data::Split::kHead), 48u);
  EXPECT_EQ(m.count(data::Split::kHead, render::ViewTag::kBack), 24u);
  for (const auto& r : m.records) {
    EXPECT_EQ(r.tag, render::classify_view(r.pose));
    EXPECT_TRUE(std::filesystem::exists(root / r.path)) << r.path;
    if (r.split == data::Split::kFace) {
      EXPECT_LE(std::abs(r.pose.yaw), render::kPi / 4);
      EXPECT_LE(std::abs(r.pose.pitch), render::kPi / 8);
    }
  }
  // Each identity is seen near yaw 0 and yaw pi.
  for (std::size_t k = 0; k < 3; ++k) {
    double near0 = 10, nearpi = 10;
    for (const auto& r : m.records) {
      if (r.split != data::Split::kHead || r.id != data::head_identity(5, k)) continue;
      near0 = std::min(near0, std::abs(r.pose.yaw));
      nearpi = std::min(nearpi, render::kPi - std::abs(r.pose.yaw));
    }
    EXPECT_LT(near0, render::kPi / 16);
    EXPECT_LT(nearpi, render::kPi / 16);
  }

  const auto back = data::DatasetManifest::read(root / "manifest.txt");
  ASSERT_EQ(back.records.size(), m.records.size());
  EXPECT_EQ(back.options.faces, 6u);
  EXPECT_EQ(back.options.seed, 5u);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(back.records[i].path, m.records[i].path);
    EXPECT_EQ(back.records[i].pose.yaw, m.records[i].pose.yaw);
    EXPECT_EQ(back.records[i].pose.pitch, m.records[i].pose.pitch);
    EXPECT_EQ(back.records[i].id, m.records[i].id);
  }
  std::filesystem::remove_all(root);
}

TEST(Dataset, FullHeadSplitArithmetic) {
  // 50 identities x 16 views, evenly split between tags; counted from poses alone.
  std::size_t front = 0, back = 0;
  for (std::size_t k = 0; k < 50; ++k) {
    std::size_t f = 0;
    for (std::size_t v = 0; v < 16; ++v) f += render::classify_view(data::head_view_pose(0, data::head_identity(0, k), v, 16)) == render::ViewTag::kFront;
    EXPECT_EQ(f, 8u);
    front += f;
    back += 16 - f;
  }
  EXPECT_EQ(front + back, 800u);
  EXPECT_EQ(back, 400u);
}

TEST(Dataset, StoredPosesReproduceImagesExactly) {
  data::GenOptions opt;
  opt.faces = 3;
  opt.heads = 1;
  opt.views = 4;
  opt.res = 16;
  const auto root = temp_dir("labels");
  const auto m = data::generate(opt, root);
  const auto reread = data::DatasetManifest::read(root / "manifest.txt");
  for (const auto& r : reread.records) {
    const auto stored = data::read_png(root / r.path);
    const auto again = data::quantize(data::reference_render(data::synth_scene(r.id, opt.accessory_prob), r.pose, opt.res));
    EXPECT_TRUE(stored == again) << r.path;
  }
  std::filesystem::remove_all(root);
}

TEST(Dataset, RegenerationIsBitIdentical) {
  data::GenOptions opt;
  opt.faces = 2;
  opt.heads = 1;
  opt.views = 4;
  opt.res = 16;
  const auto a = temp_dir("regen_a"), b = temp_dir("regen_b");
  const auto ma = data::generate(opt, a);
  data::generate(opt, b);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  for (const auto& r : ma.records) EXPECT_EQ(slurp(a / r.path), slurp(b / r.path)) << r.path;
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Dataset, UnwritableDirectoryFails) {
  data::GenOptions opt;
  opt.faces = 1;
  opt.heads = 0;
  opt.res = 8;
  const auto blocker = temp_dir("blocker");
  { std::ofstream(blocker) << "file"; }
  EXPECT_THROW(data::build_face_dataset(opt, blocker / "sub"), std::runtime_error);
  std::filesystem::remove_all(blocker);
  opt.faces = 0;
  EXPECT_THROW(data::build_face_dataset(opt, temp_dir("empty")), std::invalid_argument);
}

TEST(Dataset, LoaderDownsamplesAndFilters) {
  data::GenOptions opt;
  opt.faces = 2;
  opt.heads = 1;
  opt.views = 4;
  opt.res = 16;
  const auto root = temp_dir("load");
  const auto m = data::generate(opt, root);
  const auto heads = data::load_split(root, m, data::Split::kHead, 8);
  EXPECT_EQ(heads.size(), 4u);
  EXPECT_EQ(heads.resolution(), 8u);
  EXPECT_EQ(heads.indices(render::ViewTag::kBack).size(), 2u);
  const auto full = data::read_png(root / m.records[2].path);
  const auto small = data::box_downsample(full, 2);
  const auto g = heads.gather({0});
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(g[i], small[i]);
  EXPECT_THROW(data::load_split(root, m, data::Split::kFace, 5), std::runtime_error);
  std::filesystem::remove_all(root);
}

TEST(Dataset, BoxDownsampleAverages) {
  ad::Tensor<float> img(ad::Shape{1, 2, 2}, std::vector<float>{0.f, 1.f, 0.5f, 0.5f});
  EXPECT_FLOAT_EQ(data::box_downsample(img, 2)[0], 0.5f);
  EXPECT_THROW(data::box_downsample(img, 3), ad::ShapeError);
}

TEST(Dataset, PngRoundTripIsExactOnQuantizedValues) {
  ad::Tensor<double> d(ad::Shape{3, 4, 5});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = double(i * 37 % 101) / 100.0;
  const auto q = data::quantize(d);
  const auto p = temp_dir("png.png");
  data::write_png(p, q);
  EXPECT_TRUE(data::read_png(p) == q);
  std::filesystem::remove(p);
}

}  // namespace
