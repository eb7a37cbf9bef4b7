// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tpd/autodiff/adam.hpp"
#include "tpd/dataset/dataset.hpp"
#include "tpd/losses/losses.hpp"

// Training driver: teacher pretraining on the face split, head fine-tuning on
// the multi-view split, and tri-plane distillation with two discriminators.
namespace tpd::train {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  nn::GeneratorConfig generator;
  nn::DiscriminatorConfig discriminator;  ///< resolution follows the generator's image size
  loss::LossWeights weights;

  std::size_t batch = 16;
  std::size_t recon_batch = 8;  ///< samples rendered for the rgb and perceptual terms
  double recon_yaw_range = render::kPi / 2;  ///< reconstruction render yaw ~ U(-range, range)

  std::size_t pretrain_steps = 20000;
  std::size_t finetune_steps = 5000;
  std::size_t distill_steps = 10000;

  double lr_g_phase1 = 0.0025;
  double lr_d_phase1 = 0.002;
  double gamma_phase1 = 20.0;
  double lr_g_phase2 = 0.001;
  double lr_d_phase2 = 0.0005;

  double front_prob = 0.7;  ///< q: probability a distillation step uses a front real batch
  bool kd_all_planes = false;
  bool single_discriminator = false;

  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;

  /// Flat key = value text with every field; parse() accepts any subset,
  /// '#' comments and blank lines, and rejects unknown or repeated keys.
  std::string serialize() const;
  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::filesystem::path& file);

  /// Sets one field from text. Throws ConfigError on an unknown key or bad value.
  void set(std::string_view key, std::string_view value);
  static std::vector<std::string> keys();

  nn::DiscriminatorConfig discriminator_config() const;
  friend bool operator==(const TrainConfig& a, const TrainConfig& b) { return a.serialize() == b.serialize(); }
};

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Bad magic, truncated payload or malformed section.
class CorruptCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
/// Stored tensor does not fit the module it is loaded into.
class ShapeMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

enum class Phase : std::uint32_t { kTeacher = 1, kFinetune = 2, kDistill = 3 };
const char* phase_name(Phase p);

struct NamedTensor {
  std::string name;
  ad::Tensor<float> value;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Phase phase = Phase::kTeacher;
  std::uint64_t step = 0;
  TrainConfig config;
  std::vector<NamedTensor> tensors;
  std::string rng_state;
  std::vector<std::pair<std::string, std::uint64_t>> counters;

  void put(const std::string& prefix, const nn::Module& m);
  /// Throws ShapeMismatch when a tensor is missing or has the wrong shape.
  void get(const std::string& prefix, nn::Module& m) const;
  bool has(const std::string& prefix) const;

  void put(const std::string& prefix, const ad::AdamState& s);
  void get(const std::string& prefix, ad::AdamState& s) const;

  std::uint64_t counter(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Training state

struct Datasets {
  std::optional<data::ImageSet> faces;
  std::optional<data::ImageSet> heads;
};

/// Loads the splits a phase needs at the generator's output resolution.
Datasets load_datasets(const std::filesystem::path& root, Phase phase, const TrainConfig& cfg);

/// Everything a run owns. In the teacher phase the discriminator is d_front,
/// in fine-tuning it is d_back; distillation uses both plus a frozen teacher.
struct TrainState {
  Phase phase = Phase::kTeacher;
  TrainConfig config;
  std::uint64_t step = 0;
  Rng rng;
  std::unique_ptr<nn::Generator> generator;
  std::unique_ptr<nn::Generator> teacher;  ///< distillation only
  std::unique_ptr<nn::Discriminator> d_front, d_back;
  ad::AdamState opt_g, opt_front, opt_back;

  std::uint64_t total_steps() const;
  Checkpoint checkpoint() const;
  static TrainState from_checkpoint(const Checkpoint& ckpt);
};

TrainState init_teacher(const TrainConfig& cfg);
/// Student and D_back start from the teacher checkpoint.
TrainState init_finetune(const TrainConfig& cfg, const Checkpoint& teacher);
/// Student from the fine-tuned head generator, D_front from the teacher run,
/// D_back from the fine-tuning run.
TrainState init_distill(const TrainConfig& cfg, const Checkpoint& teacher, const Checkpoint& head);

/// Rebuilds a generator from any checkpoint (the trained generator, or the
/// frozen teacher with prefix "teacher.").
std::unique_ptr<nn::Generator> load_generator(const Checkpoint& ckpt, const std::string& prefix = "G.");

enum class Route { kNone, kFront, kBack };

struct StepRecord {
  std::uint64_t step = 0;
  Route route = Route::kNone;  ///< which discriminator was updated
  double dp = 0.0;             ///< horizontal offset of the reconstruction render pose
  bool recon_active = false;
  loss::ComponentValues comps;  ///< unweighted; 0 when a weight is 0 or the gate is closed
  double g_total = 0.0;
  double d_loss = 0.0;
  double r1 = 0.0;
  double real_logit = 0.0, fake_logit = 0.0;
  std::vector<render::ViewTag> real_tags;  ///< tags of the real batch shown to the discriminator
};

/// Raised on a non-finite loss; the message names the step and every component.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs single steps over a state.
class Trainer {
 public:
  Trainer(TrainState& state, const Datasets& data);

  StepRecord step();

 private:
  StepRecord adversarial_step();
  StepRecord distill_step();

  TrainState& s_;
  const Datasets& data_;
  nn::FixedEncoder encoder_;
  std::vector<std::size_t> face_all_, head_all_, head_back_;
};

std::string csv_header();
std::string csv_row(const StepRecord& r);

using StepHook = std::function<void(const StepRecord&, const TrainState&)>;

struct RunOptions {
  std::filesystem::path out_dir;          ///< metrics.csv and checkpoint.bin
  std::optional<std::uint64_t> stop_at;   ///< stop early at this step (checkpointed)
  StepHook hook;                           ///< after every step
  bool quiet = true;
};

/// Trains from state.step to the phase's step count (or stop_at), logging
/// every log_every steps and checkpointing every checkpoint_every steps and
/// at the end. An existing metrics.csv is truncated to rows at or below the
/// starting step, so resuming appends seamlessly.
void run(TrainState& state, const Datasets& data, const RunOptions& opt);

/// Front-view conditioning pose: yaw ~ U(-pi/4, pi/4), pitch ~ U(-pi/8, pi/8).
render::CameraPose sample_front_pose(Rng& rng);
ad::Tensor<float> sample_z(Rng& rng, std::size_t n, std::size_t dim);

}  // namespace tpd::train
