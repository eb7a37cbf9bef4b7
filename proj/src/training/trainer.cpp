// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tpd/training/training.hpp"

namespace tpd::train {
namespace {

constexpr ad::AdamOptions kAdam{0.0, 0.99, 1e-8};

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::size_t> draw(Rng& rng, const std::vector<std::size_t>& pool, std::size_t n) {
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = pool[rng.below(pool.size())];
  return out;
}

std::vector<render::CameraPose> poses_of(const data::ImageSet& set, const std::vector<std::size_t>& idx) {
  std::vector<render::CameraPose> out;
  for (std::size_t i : idx) out.push_back(set.poses[i]);
  return out;
}

ad::AdamState fresh_adam(nn::Module& m) { return ad::AdamState::for_params(m.parameters(), kAdam); }

std::string dump(const StepRecord& r) {
  std::ostringstream os;
  os << "gan_front=" << r.comps.gan_front << " kd=" << r.comps.kd << " rgb=" << r.comps.rgb << " lpips=" << r.comps.lpips
     << " map=" << r.comps.map << " gan_back=" << r.comps.gan_back << " g_total=" << r.g_total << " d_loss=" << r.d_loss;
  return os.str();
}

void check_finite(const StepRecord& r) {
  const auto& c = r.comps;
  for (double v : {c.gan_front, c.kd, c.rgb, c.lpips, c.map, c.gan_back, r.g_total, r.d_loss}) {
    if (!std::isfinite(v)) throw TrainingDiverged("non-finite loss at step " + std::to_string(r.step) + ": " + dump(r));
  }
}

double value_of(const ad::Var<float>& v) { return v.valid() ? double(v.value().item()) : 0.0; }

}  // namespace

render::CameraPose sample_front_pose(Rng& rng) {
  render::CameraPose p;
  p.yaw = rng.uniform(-render::kPi / 4, render::kPi / 4);
  p.pitch = rng.uniform(-render::kPi / 8, render::kPi / 8);
  return p;
}

ad::Tensor<float> sample_z(Rng& rng, std::size_t n, std::size_t dim) {
  ad::Tensor<float> z(ad::Shape{n, dim});
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(rng.normal());
  return z;
}

Datasets load_datasets(const std::filesystem::path& root, Phase phase, const TrainConfig& cfg) {
  const auto manifest_path = root / "manifest.txt";
  if (!std::filesystem::exists(manifest_path)) throw std::runtime_error("missing dataset manifest " + manifest_path.string());
  const auto m = data::DatasetManifest::read(manifest_path);
  const std::size_t res = cfg.generator.image_res();
  Datasets d;
  if (phase != Phase::kFinetune) d.faces = data::load_split(root, m, data::Split::kFace, res);
  if (phase != Phase::kTeacher) d.heads = data::load_split(root, m, data::Split::kHead, res);
  return d;
}

// ---------------------------------------------------------------------------
// State

std::uint64_t TrainState::total_steps() const {
  switch (phase) {
    case Phase::kTeacher: return config.pretrain_steps;
    case Phase::kFinetune: return config.finetune_steps;
    case Phase::kDistill: return config.distill_steps;
  }
  return 0;
}

Checkpoint TrainState::checkpoint() const {
  Checkpoint c;
  c.phase = phase;
  c.step = step;
  c.config = config;
  c.rng_state = rng.state();
  c.put("G.", *generator);
  c.put("optG.", opt_g);
  if (teacher) c.put("teacher.", *teacher);
  if (d_front) {
    c.put("Dfront.", *d_front);
    c.put("optDfront.", opt_front);
  }
  if (d_back) {
    c.put("Dback.", *d_back);
    c.put("optDback.", opt_back);
  }
  return c;
}

std::unique_ptr<nn::Generator> load_generator(const Checkpoint& ckpt, const std::string& prefix) {
  auto g = std::make_unique<nn::Generator>(ckpt.config.generator, 0);
  ckpt.get(prefix, *g);
  return g;
}

TrainState TrainState::from_checkpoint(const Checkpoint& c) {
  TrainState s;
  s.phase = c.phase;
  s.step = c.step;
  s.config = c.config;
  s.rng.set_state(c.rng_state);
  s.generator = load_generator(c, "G.");
  s.opt_g = fresh_adam(*s.generator);
  c.get("optG.", s.opt_g);
  if (c.has("teacher.")) s.teacher = load_generator(c, "teacher.");
  const auto dcfg = c.config.discriminator_config();
  if (c.has("Dfront.")) {
    s.d_front = std::make_unique<nn::Discriminator>(dcfg, 0);
    c.get("Dfront.", *s.d_front);
    s.opt_front = fresh_adam(*s.d_front);
    c.get("optDfront.", s.opt_front);
  }
  if (c.has("Dback.")) {
    s.d_back = std::make_unique<nn::Discriminator>(dcfg, 0);
    c.get("Dback.", *s.d_back);
    s.opt_back = fresh_adam(*s.d_back);
    c.get("optDback.", s.opt_back);
  }
  return s;
}

TrainState init_teacher(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.phase = Phase::kTeacher;
  s.config = cfg;
  s.rng = Rng(mix_seed(cfg.seed, 1));
  s.generator = std::make_unique<nn::Generator>(cfg.generator, mix_seed(cfg.seed, 11));
  s.d_front = std::make_unique<nn::Discriminator>(cfg.discriminator_config(), mix_seed(cfg.seed, 12));
  s.opt_g = fresh_adam(*s.generator);
  s.opt_front = fresh_adam(*s.d_front);
  return s;
}

namespace {

void require_same_architecture(const TrainConfig& cfg, const Checkpoint& c, const char* what) {
  if (!(cfg.generator == c.config.generator) || !(cfg.discriminator_config() == c.config.discriminator_config())) {
    throw ConfigError(std::string("config: network settings differ from the ") + what + " checkpoint");
  }
}

}  // namespace

TrainState init_finetune(const TrainConfig& cfg, const Checkpoint& teacher) {
  cfg.validate();
  require_same_architecture(cfg, teacher, "teacher");
  TrainState s;
  s.phase = Phase::kFinetune;
  s.config = cfg;
  s.rng = Rng(mix_seed(cfg.seed, 2));
  const auto t = load_generator(teacher, "G.");
  s.generator = std::make_unique<nn::Generator>(cfg.generator, 0);
  nn::init_student_from_teacher(*t, *s.generator);
  s.d_back = std::make_unique<nn::Discriminator>(cfg.discriminator_config(), 0);
  teacher.get("Dfront.", *s.d_back);
  s.opt_g = fresh_adam(*s.generator);
  s.opt_back = fresh_adam(*s.d_back);
  return s;
}

TrainState init_distill(const TrainConfig& cfg, const Checkpoint& teacher, const Checkpoint& head) {
  cfg.validate();
  require_same_architecture(cfg, teacher, "teacher");
  require_same_architecture(cfg, head, "head");
  TrainState s;
  s.phase = Phase::kDistill;
  s.config = cfg;
  s.rng = Rng(mix_seed(cfg.seed, 3));
  s.teacher = load_generator(teacher, "G.");
  s.generator = load_generator(head, "G.");
  s.d_front = std::make_unique<nn::Discriminator>(cfg.discriminator_config(), 0);
  teacher.get("Dfront.", *s.d_front);
  s.d_back = std::make_unique<nn::Discriminator>(cfg.discriminator_config(), 0);
  head.get("Dback.", *s.d_back);
  s.opt_g = fresh_adam(*s.generator);
  s.opt_front = fresh_adam(*s.d_front);
  s.opt_back = fresh_adam(*s.d_back);
  return s;
}

// ---------------------------------------------------------------------------
// Steps

Trainer::Trainer(TrainState& state, const Datasets& data) : s_(state), data_(data) {
  const std::size_t res = s_.config.generator.image_res();
  auto check = [res](const std::optional<data::ImageSet>& set, const char* name) {
    if (!set) throw std::runtime_error(std::string("training: the ") + name + " split is required for this phase");
    if (set->resolution() != res) throw std::runtime_error(std::string("training: ") + name + " split resolution does not match the generator");
  };
  if (s_.phase != Phase::kFinetune) {
    check(data_.faces, "face");
    face_all_ = iota(data_.faces->size());
  }
  if (s_.phase != Phase::kTeacher) {
    check(data_.heads, "head");
    head_all_ = iota(data_.heads->size());
    head_back_ = data_.heads->indices(render::ViewTag::kBack);
    if (s_.phase == Phase::kDistill && head_back_.empty()) throw std::runtime_error("training: head split has no back views");
  }
  if (s_.phase == Phase::kDistill && !s_.teacher) throw std::runtime_error("training: distillation needs a teacher");
}

StepRecord Trainer::step() { return s_.phase == Phase::kDistill ? distill_step() : adversarial_step(); }

StepRecord Trainer::adversarial_step() {
  const auto& cfg = s_.config;
  const bool teacher_phase = s_.phase == Phase::kTeacher;
  const auto& set = teacher_phase ? *data_.faces : *data_.heads;
  const auto& pool = teacher_phase ? face_all_ : head_all_;
  auto& d = teacher_phase ? *s_.d_front : *s_.d_back;
  auto& opt_d = teacher_phase ? s_.opt_front : s_.opt_back;
  auto& g = *s_.generator;
  auto& rng = s_.rng;
  const std::size_t n = cfg.batch;

  StepRecord rec;
  rec.step = s_.step + 1;
  rec.route = teacher_phase ? Route::kFront : Route::kBack;

  const auto z = sample_z(rng, n, cfg.generator.z_dim);
  std::vector<render::CameraPose> cond(n);
  for (auto& p : cond) p = sample_front_pose(rng);
  const auto real_idx = draw(rng, pool, n);
  const auto fake_poses = poses_of(set, draw(rng, pool, n));
  const std::uint64_t jitter = rng.next_u64();
  for (auto i : real_idx) rec.real_tags.push_back(set.tags[i]);

  ad::Tape<float> tape;
  nn::Bind<float> gb(tape, ad::Mode::kTrain);
  nn::Bind<float> db(tape, ad::Mode::kFrozen);
  const auto w = g.map(gb, z, cond);
  const auto out = g.render(gb, g.synthesize(gb, w), fake_poses, jitter);
  const auto fake_pose_t = render::pose_batch(fake_poses);
  const auto lg = loss::gan_g(d.forward(db, out.image, fake_pose_t));
  (teacher_phase ? rec.comps.gan_front : rec.comps.gan_back) = value_of(lg);
  rec.g_total = value_of(lg);
  check_finite(rec);
  g.zero_grad();
  tape.backward(lg);
  ad::adam_step(g.parameters(), s_.opt_g, cfg.lr_g_phase1);

  ad::Tape<float> dtape;
  nn::Bind<float> dbind(dtape, ad::Mode::kTrain);
  const auto res = loss::gan_d(d, dbind, out.image.value(), set.gather(real_idx), fake_pose_t,
                               render::pose_batch(poses_of(set, real_idx)), cfg.gamma_phase1);
  rec.d_loss = value_of(res.loss);
  rec.r1 = res.r1;
  rec.real_logit = res.real_logit_mean;
  rec.fake_logit = res.fake_logit_mean;
  check_finite(rec);
  d.zero_grad();
  dtape.backward(res.loss);
  ad::adam_step(d.parameters(), opt_d, cfg.lr_d_phase1);

  s_.step = rec.step;
  return rec;
}

StepRecord Trainer::distill_step() {
  const auto& cfg = s_.config;
  const auto& lw = cfg.weights;
  auto& g = *s_.generator;
  auto& t = *s_.teacher;
  auto& rng = s_.rng;
  const std::size_t n = cfg.batch;

  StepRecord rec;
  rec.step = s_.step + 1;

  // All draws happen up front and unconditionally, so ablations that skip a
  // term still consume the same random stream.
  const auto z = sample_z(rng, n, cfg.generator.z_dim);
  std::vector<render::CameraPose> cond(n);
  for (auto& p : cond) p = sample_front_pose(rng);
  render::CameraPose recon_pose;
  recon_pose.yaw = rng.uniform(-cfg.recon_yaw_range, cfg.recon_yaw_range);
  recon_pose.pitch = rng.uniform(-render::kPi / 8, render::kPi / 8);
  const std::uint64_t recon_jitter = rng.next_u64();
  const bool front = rng.bernoulli(cfg.front_prob);
  const auto& set = front ? *data_.faces : *data_.heads;
  const auto& pool = front ? face_all_ : head_back_;
  const auto real_idx = draw(rng, pool, n);
  const auto fake_poses = poses_of(set, draw(rng, pool, n));
  const std::uint64_t gan_jitter = rng.next_u64();
  for (auto i : real_idx) rec.real_tags.push_back(set.tags[i]);

  // Teacher: constants only.
  ad::Tape<float> ttape;
  nn::Bind<float> tb(ttape, ad::Mode::kFrozen);
  const auto wt = t.map(tb, z, cond);
  const auto ft = t.synthesize(tb, wt);

  ad::Tape<float> tape;
  nn::Bind<float> gb(tape, ad::Mode::kTrain);
  const auto ws = g.map(gb, z, cond);
  const auto fs = g.synthesize(gb, ws);

  loss::Components<float> c;
  if (lw.kd > 0.0) {
    if (cfg.kd_all_planes) {
      c.kd = loss::kd(tape.constant(ft.value()), fs);
    } else {
      c.kd = loss::kd(tape.constant(triplane::split_planes(ft).xy.value()), triplane::split_planes(fs).xy);
    }
  }
  if (lw.map > 0.0) c.map = loss::map(tape.constant(wt.value()), ws);

  rec.dp = render::horizontal_offset(recon_pose);
  if ((lw.rgb > 0.0 || lw.lpips > 0.0) && loss::gate_open(rec.dp, lw.tau)) {
    rec.recon_active = true;
    const std::size_t nr = cfg.recon_batch;
    const std::vector<render::CameraPose> poses(nr, recon_pose);
    const auto out_t = t.render(tb, ad::slice(ft, 0, 0, nr), poses, recon_jitter);
    const auto out_s = g.render(gb, ad::slice(fs, 0, 0, nr), poses, recon_jitter);
    const auto image_t = tape.constant(out_t.image.value());
    if (lw.rgb > 0.0) {
      c.rgb = loss::rgb(image_t, out_s.image, tape.constant(ad::slice(out_t.raw, 1, 0, 3).value()), ad::slice(out_s.raw, 1, 0, 3),
                        rec.dp, lw.tau);
    }
    if (lw.lpips > 0.0) c.lpips = loss::perceptual(encoder_, image_t, out_s.image, rec.dp, lw.tau);
  }

  const bool use_front = cfg.single_discriminator || front;
  auto& d = use_front ? *s_.d_front : *s_.d_back;
  auto& opt_d = use_front ? s_.opt_front : s_.opt_back;
  const double gamma = use_front ? lw.gamma_front : lw.gamma_back;
  rec.route = use_front ? Route::kFront : Route::kBack;

  const auto out = g.render(gb, fs, fake_poses, gan_jitter);
  const auto fake_pose_t = render::pose_batch(fake_poses);
  if ((front && lw.gan_front > 0.0) || (!front && lw.gan_back > 0.0)) {
    nn::Bind<float> db(tape, ad::Mode::kFrozen);
    (front ? c.gan_front : c.gan_back) = loss::gan_g(d.forward(db, out.image, fake_pose_t));
  }
  const auto total = loss::total(tape, c, lw);
  rec.comps = {value_of(c.gan_front), value_of(c.kd), value_of(c.rgb), value_of(c.lpips), value_of(c.map), value_of(c.gan_back)};
  rec.g_total = value_of(total);
  check_finite(rec);
  g.zero_grad();
  tape.backward(total);
  ad::adam_step(g.parameters(), s_.opt_g, cfg.lr_g_phase2);

  ad::Tape<float> dtape;
  nn::Bind<float> dbind(dtape, ad::Mode::kTrain);
  const auto res = loss::gan_d(d, dbind, out.image.value(), set.gather(real_idx), fake_pose_t,
                               render::pose_batch(poses_of(set, real_idx)), gamma);
  rec.d_loss = value_of(res.loss);
  rec.r1 = res.r1;
  rec.real_logit = res.real_logit_mean;
  rec.fake_logit = res.fake_logit_mean;
  check_finite(rec);
  d.zero_grad();
  dtape.backward(res.loss);
  ad::adam_step(d.parameters(), opt_d, cfg.lr_d_phase2);

  s_.step = rec.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Logging and the run loop

std::string csv_header() {
  return "step,route,dp,recon,gan_front,kd,rgb,lpips,map,gan_back,g_total,d_loss,r1,d_front_real,d_front_fake,d_back_real,d_back_fake";
}

std::string csv_row(const StepRecord& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  const bool f = r.route == Route::kFront, b = r.route == Route::kBack;
  std::string s = std::to_string(r.step) + "," + (f ? "front" : b ? "back" : "none") + "," + num(r.dp) + "," + (r.recon_active ? "1" : "0");
  for (double v : {r.comps.gan_front, r.comps.kd, r.comps.rgb, r.comps.lpips, r.comps.map, r.comps.gan_back, r.g_total, r.d_loss, r.r1})
    s += "," + num(v);
  s += "," + (f ? num(r.real_logit) : "") + "," + (f ? num(r.fake_logit) : "");
  s += "," + (b ? num(r.real_logit) : "") + "," + (b ? num(r.fake_logit) : "");
  return s;
}

namespace {

// Keeps the header and rows logged at or before `step`.
void prepare_log(const std::filesystem::path& file, std::uint64_t step) {
  std::vector<std::string> keep{csv_header()};
  if (std::ifstream is(file); is) {
    std::string line;
    std::getline(is, line);
    if (line != csv_header()) throw std::runtime_error("metrics log " + file.string() + " has an unexpected header");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= step) keep.push_back(line);
    }
  }
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write metrics log " + file.string());
  for (const auto& l : keep) os << l << "\n";
}

}  // namespace

void run(TrainState& state, const Datasets& data, const RunOptions& opt) {
  std::error_code ec;
  std::filesystem::create_directories(opt.out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + opt.out_dir.string() + ": " + ec.message());
  const auto log_path = opt.out_dir / "metrics.csv";
  const auto ckpt_path = opt.out_dir / "checkpoint.bin";
  prepare_log(log_path, state.step);
  std::ofstream log(log_path, std::ios::app);

  Trainer trainer(state, data);
  std::uint64_t target = state.total_steps();
  if (opt.stop_at) target = std::min(target, *opt.stop_at);
  const auto& cfg = state.config;
  while (state.step < target) {
    const auto rec = trainer.step();
    if (opt.hook) opt.hook(rec, state);
    if (rec.step % cfg.log_every == 0) {
      log << csv_row(rec) << "\n" << std::flush;
      if (!opt.quiet) {
        std::fprintf(stderr, "[%s] step %llu/%llu g %.4f d %.4f\n", phase_name(state.phase), static_cast<unsigned long long>(rec.step),
                     static_cast<unsigned long long>(state.total_steps()), rec.g_total, rec.d_loss);
      }
    }
    if (rec.step % cfg.checkpoint_every == 0) save_checkpoint(state.checkpoint(), ckpt_path);
  }
  save_checkpoint(state.checkpoint(), ckpt_path);
}

}  // namespace tpd::train
