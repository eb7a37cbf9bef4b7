// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tpd/autodiff/tensor.hpp"
#include "tpd/renderer/renderer.hpp"

// Procedural "blob head" dataset.
//
// Each identity is an ellipsoid head whose front carries the distinctive
// features (skin tone, eyes, mouth) and whose back carries a hair cap, an
// offset shell clipped to the rear and top. An optional accessory band wraps
// the head. Images are ray traced analytically with two mirror-symmetric
// Lambertian lights and a white background.
namespace tpd::data {

using Color = std::array<double, 3>;

struct SceneSpec {
  std::uint64_t id_seed = 0;
  render::Vec3 radii{0.3, 0.34, 0.3};  ///< head ellipsoid semi-axes
  Color skin{0.8, 0.6, 0.5};
  double eye_spread = 0.35;   ///< half-angle between eye directions, radians
  double eye_height = 0.15;   ///< eye elevation angle, radians
  double eye_size = 0.18;     ///< angular radius of the iris
  Color iris{0.2, 0.4, 0.7};
  Color pupil{0.05, 0.05, 0.08};
  double mouth_height = -0.35;  ///< elevation angle of the mouth centre
  double mouth_width = 0.3;     ///< angular half-width
  Color mouth{0.6, 0.2, 0.25};
  double hair_extent = 1.9;     ///< polar angle from the back axis covered by hair
  double hair_thickness = 1.1;  ///< shell scale relative to the head
  Color hair{0.2, 0.12, 0.06};
  bool accessory = false;
  double band_height = 0.12;  ///< y of the band centre relative to radii[1]
  double band_width = 0.06;
  Color band{0.1, 0.5, 0.3};
};

/// Deterministic in the seed. accessory_prob sets the band frequency.
SceneSpec synth_scene(std::uint64_t id_seed, double accessory_prob = 0.3);

/// Analytic render [3, res, res] in [0, 1] with supersample^2 stratified
/// sub-pixel rays per pixel.
ad::Tensor<double> reference_render(const SceneSpec& scene, const render::CameraPose& cam, std::size_t res,
                                    std::size_t supersample = 2);

/// Colour seen along one ray; white on a miss.
Color trace_ray(const SceneSpec& scene, const render::Vec3& origin, const render::Vec3& dir);

/// Quantises to 8 bits and back, as stored on disk.
ad::Tensor<float> quantize(const ad::Tensor<double>& image);

enum class Split { kFace, kHead };
const char* split_name(Split s);

struct DatasetRecord {
  std::string path;  ///< relative to the dataset root
  render::CameraPose pose;
  render::ViewTag tag = render::ViewTag::kFront;
  std::uint64_t id = 0;  ///< identity seed
  Split split = Split::kFace;
};

struct GenOptions {
  std::size_t faces = 2000;
  std::size_t heads = 50;
  std::size_t views = 16;
  std::uint64_t seed = 0;
  std::size_t res = 64;
  double accessory_prob = 0.3;
};

/// Text manifest: '#' header lines with the generation options, then one
/// record per line: path yaw pitch radius tag id.
struct DatasetManifest {
  GenOptions options;
  std::vector<DatasetRecord> records;

  std::size_t count(Split s) const;
  std::size_t count(Split s, render::ViewTag t) const;

  void write(const std::filesystem::path& file) const;
  static DatasetManifest read(const std::filesystem::path& file);
};

/// Identity seed of face i or head identity k.
std::uint64_t face_identity(std::uint64_t seed, std::size_t i);
std::uint64_t head_identity(std::uint64_t seed, std::size_t k);

/// Pose of head view k out of `views` for one identity: yaw (k + 0.25) 2pi / views
/// wrapped to (-pi, pi], pitch jittered in [-pi/16, pi/16].
render::CameraPose head_view_pose(std::uint64_t seed, std::uint64_t identity, std::size_t k, std::size_t views);

/// Front-view pose of face i: yaw in [-pi/4, pi/4], pitch in [-pi/8, pi/8].
render::CameraPose face_pose(std::uint64_t seed, std::size_t i);

/// Render and write one split under root; returns its records. Throws
/// std::runtime_error when the directory cannot be written.
std::vector<DatasetRecord> build_face_dataset(const GenOptions& opt, const std::filesystem::path& root);
std::vector<DatasetRecord> build_head_dataset(const GenOptions& opt, const std::filesystem::path& root);

/// Both splits plus root/manifest.txt.
DatasetManifest generate(const GenOptions& opt, const std::filesystem::path& root);

/// Images in memory, box-filtered to a training resolution.
struct ImageSet {
  ad::Tensor<float> images;  ///< [N, 3, res, res]
  std::vector<render::CameraPose> poses;
  std::vector<render::ViewTag> tags;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return poses.size(); }
  std::size_t resolution() const { return images.dim(2); }

  /// Gathers items into a batch [B, 3, res, res].
  ad::Tensor<float> gather(const std::vector<std::size_t>& idx) const;

  /// Indices of items with the given tag.
  std::vector<std::size_t> indices(render::ViewTag t) const;
};

/// Loads every record of a split. res must divide the stored resolution.
ImageSet load_split(const std::filesystem::path& root, const DatasetManifest& manifest, Split split, std::size_t res);

/// PNG IO for [3, H, W] images in [0, 1].
void write_png(const std::filesystem::path& file, const ad::Tensor<float>& image);
ad::Tensor<float> read_png(const std::filesystem::path& file);

/// Mean over factor x factor blocks of a [C, H, W] image.
ad::Tensor<float> box_downsample(const ad::Tensor<float>& image, std::size_t factor);

}  // namespace tpd::data
