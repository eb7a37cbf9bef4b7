// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tpd/training/training.hpp"

namespace {

using namespace tpd;
using train::Phase;
using train::TrainConfig;

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tpd_train_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// Column indices of csv_header().
enum Col { kStep, kRoute, kDp, kRecon, kGanFront, kKd, kRgb, kLpips, kMap, kGanBack, kGTotal, kDLoss };

TrainConfig tiny_config() {
  return TrainConfig::parse(R"(
g.z_dim = 8
g.w_dim = 8
g.mapping_layers = 2
g.backbone_channels = 8
g.plane_channels = 4
g.plane_res = 8
g.decoder_hidden = 8
g.feature_channels = 2
g.raw_res = 16
g.samples = 6
g.sr_channels = 8
d.base_channels = 4
d.max_channels = 8
d.hidden = 8
d.pose_embed = 4
d.mbstd_group = 2
batch = 2
recon_batch = 1
pretrain_steps = 6
finetune_steps = 6
distill_steps = 24
log_every = 1
checkpoint_every = 1000
seed = 3
)");
}

class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new std::filesystem::path(scratch("data"));
    data::GenOptions opt;
    opt.faces = 8;
    opt.heads = 2;
    opt.views = 8;
    opt.res = 32;
    data::generate(opt, *root_);
  }
  static void TearDownTestSuite() {
    std::filesystem::remove_all(*root_);
    delete root_;
  }

  static train::Checkpoint teacher_ckpt() {
    static const train::Checkpoint c = [] {
      auto s = train::init_teacher(tiny_config());
      const auto d = train::load_datasets(*root_, Phase::kTeacher, s.config);
      train::RunOptions o;
      o.out_dir = scratch("teacher_shared");
      train::run(s, d, o);
      return s.checkpoint();
    }();
    return c;
  }

  static train::Checkpoint head_ckpt() {
    static const train::Checkpoint c = [] {
      auto s = train::init_finetune(tiny_config(), teacher_ckpt());
      const auto d = train::load_datasets(*root_, Phase::kFinetune, s.config);
      train::RunOptions o;
      o.out_dir = scratch("head_shared");
      train::run(s, d, o);
      return s.checkpoint();
    }();
    return c;
  }

  static std::filesystem::path* root_;
};

std::filesystem::path* TrainingTest::root_ = nullptr;

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsCarryTheStatedHyperparameters) {
  const TrainConfig c;
  EXPECT_EQ(c.batch, 16u);
  EXPECT_DOUBLE_EQ(c.lr_g_phase1, 0.0025);
  EXPECT_DOUBLE_EQ(c.lr_d_phase1, 0.002);
  EXPECT_DOUBLE_EQ(c.gamma_phase1, 20.0);
  EXPECT_DOUBLE_EQ(c.lr_g_phase2, 0.001);
  EXPECT_DOUBLE_EQ(c.lr_d_phase2, 0.0005);
  EXPECT_DOUBLE_EQ(c.weights.gamma_front, 1.0);
  EXPECT_DOUBLE_EQ(c.weights.gamma_back, 20.0);
  EXPECT_DOUBLE_EQ(c.weights.tau, render::kPi / 4);
  EXPECT_DOUBLE_EQ(c.front_prob, 0.7);
  EXPECT_EQ(c.pretrain_steps, 20000u);
  EXPECT_EQ(c.finetune_steps, 5000u);
  EXPECT_EQ(c.distill_steps, 10000u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, SerializeParseRoundTrip) {
  auto c = tiny_config();
  c.front_prob = 0.123456789012345;
  c.weights.kd = 0.1;
  c.single_discriminator = true;
  const auto back = TrainConfig::parse(c.serialize());
  EXPECT_EQ(back.serialize(), c.serialize());
  EXPECT_TRUE(back == c);
  // Every field appears in the text.
  for (const auto& k : TrainConfig::keys()) EXPECT_NE(c.serialize().find(k + " = "), std::string::npos) << k;
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(TrainConfig::parse("no_such_key = 1\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("batch = four\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("batch = 4\nbatch = 8\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("batch 4\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("lr_g_phase2 = 0\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("front_prob = 1\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("front_prob = 0\n"), train::ConfigError);
  EXPECT_THROW(TrainConfig::parse("seed = -1\n"), train::ConfigError);
  EXPECT_NO_THROW(TrainConfig::parse("# comment\n\n  batch = 8   # trailing\n"));
}

// ---------------------------------------------------------------------------
// Checkpoints

train::Checkpoint small_checkpoint() {
  train::Checkpoint c;
  c.config = tiny_config();
  c.phase = Phase::kFinetune;
  c.step = 42;
  Rng rng(5);
  rng.normal();
  c.rng_state = rng.state();
  nn::Generator g(c.config.generator, 1);
  c.put("G.", g);
  c.counters.emplace_back("x", 7);
  return c;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt");
  std::filesystem::create_directories(dir);
  save_checkpoint(small_checkpoint(), dir / "a.bin");
  const auto loaded = train::load_checkpoint(dir / "a.bin");
  save_checkpoint(loaded, dir / "b.bin");
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  EXPECT_EQ(loaded.step, 42u);
  EXPECT_EQ(loaded.phase, Phase::kFinetune);
  EXPECT_EQ(loaded.counter("x"), 7u);
  EXPECT_TRUE(loaded.config == tiny_config());

  Rng a(0), b(5);
  b.normal();
  a.set_state(loaded.rng_state);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.next_u64(), b.next_u64());

  nn::Generator g1(tiny_config().generator, 1), g2(tiny_config().generator, 2);
  loaded.get("G.", g2);
  EXPECT_EQ(g1.digest(), g2.digest());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, DistinctErrors) {
  const auto dir = scratch("ckpt_err");
  std::filesystem::create_directories(dir);
  save_checkpoint(small_checkpoint(), dir / "ok.bin");
  const auto bytes = slurp(dir / "ok.bin");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };
  EXPECT_THROW(train::load_checkpoint(write("trunc.bin", bytes.substr(0, bytes.size() / 2))), train::CorruptCheckpoint);
  EXPECT_THROW(train::load_checkpoint(write("short.bin", bytes.substr(0, 10))), train::CorruptCheckpoint);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(train::load_checkpoint(write("magic.bin", magic)), train::CorruptCheckpoint);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(train::load_checkpoint(write("version.bin", version)), train::VersionMismatch);
  EXPECT_THROW(train::load_checkpoint(write("trailing.bin", bytes + "x")), train::CorruptCheckpoint);

  // Shape mismatch on load into a different architecture.
  auto cfg = tiny_config();
  cfg.generator.plane_channels = 6;
  nn::Generator other(cfg.generator, 0);
  EXPECT_THROW(train::load_checkpoint(dir / "ok.bin").get("G.", other), train::ShapeMismatch);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Teacher and fine-tuning

TEST_F(TrainingTest, TeacherRunIsDeterministicAndResumable) {
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  auto cfg = tiny_config();
  cfg.pretrain_steps = 10;
  const auto data = train::load_datasets(*root_, Phase::kTeacher, cfg);

  auto run = [&](const std::filesystem::path& out, std::optional<std::uint64_t> stop) {
    auto s = train::init_teacher(cfg);
    train::RunOptions o;
    o.out_dir = out;
    o.stop_at = stop;
    train::run(s, data, o);
    return s.generator->digest();
  };
  const auto da = run(a, std::nullopt);
  const auto db = run(b, std::nullopt);
  EXPECT_EQ(da, db);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(read_csv(a / "metrics.csv").size(), 10u);

  // Interrupted at step 5, resumed from the checkpoint.
  run(c, 5);
  EXPECT_EQ(read_csv(c / "metrics.csv").size(), 5u);
  auto s = train::TrainState::from_checkpoint(train::load_checkpoint(c / "checkpoint.bin"));
  EXPECT_EQ(s.step, 5u);
  train::RunOptions o;
  o.out_dir = c;
  train::run(s, data, o);
  EXPECT_EQ(s.generator->digest(), da);
  EXPECT_EQ(slurp(c / "metrics.csv"), slurp(a / "metrics.csv"));
  for (const auto& p : {a, b, c}) std::filesystem::remove_all(p);
}

TEST_F(TrainingTest, TeacherLogsFrontRoute) {
  const auto dir = scratch("teacher_log");
  auto s = train::init_teacher(tiny_config());
  const auto d = train::load_datasets(*root_, Phase::kTeacher, s.config);
  train::RunOptions o;
  o.out_dir = dir;
  train::run(s, d, o);
  for (const auto& row : read_csv(dir / "metrics.csv")) {
    EXPECT_EQ(row[kRoute], "front");
    EXPECT_GT(std::stod(row[kGanFront]), 0.0);
    EXPECT_EQ(std::stod(row[kKd]), 0.0);
  }
  std::filesystem::remove_all(dir);
}

TEST_F(TrainingTest, FinetuneWithZeroStepsReproducesTeacher) {
  auto cfg = tiny_config();
  cfg.finetune_steps = 0;
  const auto t = teacher_ckpt();
  auto s = train::init_finetune(cfg, t);
  const auto dir = scratch("ft0");
  train::RunOptions o;
  o.out_dir = dir;
  train::run(s, train::load_datasets(*root_, Phase::kFinetune, cfg), o);
  EXPECT_EQ(s.step, 0u);
  EXPECT_EQ(s.generator->digest(), train::load_generator(t)->digest());
  std::filesystem::remove_all(dir);
}

TEST_F(TrainingTest, FinetuneAdvancesAndRoundTrips) {
  const auto h = head_ckpt();
  EXPECT_EQ(h.phase, Phase::kFinetune);
  EXPECT_EQ(h.step, tiny_config().finetune_steps);
  EXPECT_NE(train::load_generator(h)->digest(), train::load_generator(teacher_ckpt())->digest());
  const auto s = train::TrainState::from_checkpoint(h);
  EXPECT_EQ(s.checkpoint().tensors.size(), h.tensors.size());
  EXPECT_FALSE(s.d_front);
  EXPECT_TRUE(s.d_back);
}

TEST_F(TrainingTest, MismatchedArchitectureRejected) {
  auto cfg = tiny_config();
  cfg.generator.plane_channels = 6;
  EXPECT_THROW(train::init_finetune(cfg, teacher_ckpt()), train::ConfigError);
}

TEST_F(TrainingTest, MissingManifestIsAnError) {
  EXPECT_THROW(train::load_datasets(scratch("nothing"), Phase::kTeacher, tiny_config()), std::runtime_error);
}

// ---------------------------------------------------------------------------
// Distillation

struct DistillRun {
  std::vector<std::vector<std::string>> rows;
  std::uint64_t teacher_before = 0, teacher_after = 0;
  std::size_t exclusivity_violations = 0;
  std::size_t routing_violations = 0;
};

DistillRun distill(const TrainConfig& cfg, const train::Checkpoint& t, const train::Checkpoint& h,
                   const std::filesystem::path& data_root, const std::string& name) {
  DistillRun r;
  auto s = train::init_distill(cfg, t, h);
  r.teacher_before = s.teacher->digest();
  std::uint64_t front = s.d_front->digest(), back = s.d_back->digest();
  train::RunOptions o;
  o.out_dir = scratch(name);
  o.hook = [&](const train::StepRecord& rec, const train::TrainState& st) {
    const auto f = st.d_front->digest(), b = st.d_back->digest();
    const bool fc = f != front, bc = b != back;
    if (fc == bc) ++r.exclusivity_violations;
    if ((rec.route == train::Route::kFront) != fc) ++r.routing_violations;
    for (auto t : rec.real_tags)
      if ((t == render::ViewTag::kFront) != (rec.route == train::Route::kFront) && !st.config.single_discriminator) ++r.routing_violations;
    front = f;
    back = b;
  };
  train::run(s, train::load_datasets(data_root, Phase::kDistill, cfg), o);
  r.teacher_after = s.teacher->digest();
  r.rows = read_csv(o.out_dir / "metrics.csv");
  std::filesystem::remove_all(o.out_dir);
  return r;
}

TEST_F(TrainingTest, DistillContracts) {
  const auto cfg = tiny_config();
  const auto r = distill(cfg, teacher_ckpt(), head_ckpt(), *root_, "distill");
  ASSERT_EQ(r.rows.size(), cfg.distill_steps);
  EXPECT_EQ(r.teacher_before, r.teacher_after);
  EXPECT_EQ(r.exclusivity_violations, 0u);
  EXPECT_EQ(r.routing_violations, 0u);
  EXPECT_GT(std::stod(r.rows[0][kKd]), 0.0);

  std::size_t fronts = 0, gated = 0, open = 0;
  for (const auto& row : r.rows) {
    const bool front = row[kRoute] == "front";
    fronts += front;
    // The generator term follows the real batch's tag.
    EXPECT_EQ(std::stod(row[front ? kGanBack : kGanFront]), 0.0);
    EXPECT_GT(std::stod(row[front ? kGanFront : kGanBack]), 0.0);
    if (std::abs(std::stod(row[kDp])) > cfg.weights.tau) {
      ++gated;
      EXPECT_EQ(row[kRecon], "0");
      EXPECT_EQ(std::stod(row[kRgb]), 0.0);
      EXPECT_EQ(std::stod(row[kLpips]), 0.0);
    } else {
      ++open;
      EXPECT_EQ(row[kRecon], "1");
      EXPECT_GT(std::stod(row[kRgb]), 0.0);
    }
  }
  EXPECT_GT(fronts, 0u);
  EXPECT_LT(fronts, r.rows.size());
  EXPECT_GT(gated, 0u);
  EXPECT_GT(open, 0u);
}

TEST_F(TrainingTest, DistillIsDeterministic) {
  const auto a = distill(tiny_config(), teacher_ckpt(), head_ckpt(), *root_, "det1");
  const auto b = distill(tiny_config(), teacher_ckpt(), head_ckpt(), *root_, "det2");
  EXPECT_EQ(a.rows, b.rows);
}

TEST_F(TrainingTest, AblationSwitches) {
  auto base = tiny_config();
  base.distill_steps = 8;
  const auto ref = distill(base, teacher_ckpt(), head_ckpt(), *root_, "abl_ref");

  auto no_gan = base;
  no_gan.weights.gan_front = 0;
  for (const auto& row : distill(no_gan, teacher_ckpt(), head_ckpt(), *root_, "abl_gan").rows) EXPECT_EQ(std::stod(row[kGanFront]), 0.0);

  auto no_kd = base;
  no_kd.weights.kd = 0;
  const auto nk = distill(no_kd, teacher_ckpt(), head_ckpt(), *root_, "abl_kd");
  for (const auto& row : nk.rows) EXPECT_EQ(std::stod(row[kKd]), 0.0);
  // Same random stream: routes and render offsets are unchanged.
  for (std::size_t i = 0; i < nk.rows.size(); ++i) {
    EXPECT_EQ(nk.rows[i][kRoute], ref.rows[i][kRoute]);
    EXPECT_EQ(nk.rows[i][kDp], ref.rows[i][kDp]);
  }

  auto no_recon = base;
  no_recon.weights.rgb = 0;
  no_recon.weights.lpips = 0;
  for (const auto& row : distill(no_recon, teacher_ckpt(), head_ckpt(), *root_, "abl_rec").rows) {
    EXPECT_EQ(std::stod(row[kRgb]), 0.0);
    EXPECT_EQ(std::stod(row[kLpips]), 0.0);
  }

  auto full = base;
  full.kd_all_planes = true;
  const auto fk = distill(full, teacher_ckpt(), head_ckpt(), *root_, "abl_full");
  // First step shares weights and inputs; the all-plane norm bounds the xy norm.
  EXPECT_GT(std::stod(fk.rows[0][kKd]), std::stod(ref.rows[0][kKd]));

  auto single = base;
  single.single_discriminator = true;
  const auto sd = distill(single, teacher_ckpt(), head_ckpt(), *root_, "abl_single");
  EXPECT_EQ(sd.exclusivity_violations, 0u);
  for (const auto& row : sd.rows) EXPECT_EQ(row[kRoute], "front");
}

TEST_F(TrainingTest, NonFiniteLossAborts) {
  auto s = train::init_distill(tiny_config(), teacher_ckpt(), head_ckpt());
  s.generator->param(0).value[0] = std::numeric_limits<float>::quiet_NaN();
  const auto data = train::load_datasets(*root_, Phase::kDistill, s.config);
  train::Trainer t(s, data);
  try {
    t.step();
    FAIL() << "expected TrainingDiverged";
  } catch (const train::TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("kd="), std::string::npos);
  }
}

}  // namespace
