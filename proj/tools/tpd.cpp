// SPDX-License-Identifier: Apache-2.0
// Command-line front end: dataset generation, the three training phases and
// the analysis reports.
#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "tpd/analysis/analysis.hpp"
#include "tpd/training/training.hpp"

namespace {

using namespace tpd;
namespace fs = std::filesystem;

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

std::unique_ptr<nn::Generator> generator_from(const fs::path& ckpt) {
  return train::load_generator(train::load_checkpoint(ckpt));
}

std::vector<triplane::Plane> parse_planes(const std::vector<std::string>& names) {
  std::vector<triplane::Plane> out;
  for (const auto& n : names) {
    auto p = triplane::parse_plane(n);
    if (!p) throw CLI::ValidationError("--planes", "unknown plane '" + n + "' (expected xy, xz or yz)");
    out.push_back(*p);
  }
  return out;
}

struct DatasetArgs {
  data::GenOptions opt;
  std::string out;
};

struct TrainArgs {
  std::string phase, config, data, out, teacher, head, resume;
  std::optional<std::uint64_t> seed, steps, stop_at;
  std::vector<std::string> overrides;
  bool no_kd = false, no_gan_front = false, no_rgb_lpips = false, full_kd = false, single_d = false, swap_only = false;
};

train::TrainConfig build_config(const TrainArgs& a) {
  auto cfg = a.config.empty() ? train::TrainConfig{} : train::TrainConfig::load(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw train::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.no_kd) cfg.weights.kd = 0;
  if (a.no_gan_front) cfg.weights.gan_front = 0;
  if (a.no_rgb_lpips) cfg.weights.rgb = cfg.weights.lpips = 0;
  if (a.full_kd) cfg.kd_all_planes = true;
  if (a.single_d) cfg.single_discriminator = true;
  if (a.steps) {
    if (a.phase == "teacher") cfg.pretrain_steps = *a.steps;
    else if (a.phase == "finetune") cfg.finetune_steps = *a.steps;
    else cfg.distill_steps = *a.steps;
  }
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  const train::Phase phase = a.phase == "teacher" ? train::Phase::kTeacher
                             : a.phase == "finetune" ? train::Phase::kFinetune
                                                     : train::Phase::kDistill;
  const fs::path out = a.out;
  ensure_dir(out);

  if (a.swap_only) {
    if (phase != train::Phase::kDistill) throw CLI::ValidationError("--swap-only", "only applies to distill");
    if (a.teacher.empty() || a.head.empty()) throw CLI::ValidationError("--swap-only", "needs --teacher and --head");
    const auto cfg = build_config(a);
    auto face = generator_from(a.teacher), head = generator_from(a.head);
    const auto z = analysis::latents(cfg.seed, 8, face->config().z_dim);
    std::vector<ad::Tensor<float>> cells;
    for (const auto& cam : {analysis::frontal_pose(), analysis::back_pose()})
      for (auto& im : analysis::unbatch(analysis::swap_only_render(*face, *head, z, cam).images)) cells.push_back(std::move(im));
    analysis::emit_grid(cells, 2, 8, out / "swap_only.png");
    std::printf("wrote %s\n", (out / "swap_only.png").c_str());
    return 0;
  }

  train::TrainState state;
  if (!a.resume.empty()) {
    state = train::TrainState::from_checkpoint(train::load_checkpoint(a.resume));
    if (state.phase != phase) {
      throw train::CheckpointError("checkpoint " + a.resume + " is from the " + train::phase_name(state.phase) +
                                   " phase, not " + a.phase);
    }
  } else {
    const auto cfg = build_config(a);
    switch (phase) {
      case train::Phase::kTeacher: state = train::init_teacher(cfg); break;
      case train::Phase::kFinetune:
        if (a.teacher.empty()) throw CLI::ValidationError("--teacher", "finetune needs the teacher checkpoint");
        state = train::init_finetune(cfg, train::load_checkpoint(a.teacher));
        break;
      case train::Phase::kDistill:
        if (a.teacher.empty() || a.head.empty()) throw CLI::ValidationError("distill", "needs --teacher and --head");
        state = train::init_distill(cfg, train::load_checkpoint(a.teacher), train::load_checkpoint(a.head));
        break;
    }
  }
  write_text(out / "config.txt", state.config.serialize());
  const auto data = train::load_datasets(a.data, phase, state.config);
  train::RunOptions opt;
  opt.out_dir = out;
  opt.stop_at = a.stop_at;
  opt.quiet = false;
  train::run(state, data, opt);
  std::printf("%s: step %llu, checkpoint %s\n", a.phase.c_str(), static_cast<unsigned long long>(state.step),
              (out / "checkpoint.bin").c_str());
  return 0;
}

void emit_report(const fs::path& out, const std::string& stem, const std::string& text, const std::string& csv) {
  std::fputs(text.c_str(), stdout);
  if (out.empty()) return;
  ensure_dir(out);
  write_text(out / (stem + ".txt"), text);
  write_text(out / (stem + ".csv"), csv);
}

}  // namespace

int main(int argc, char** argv) {
  // Autodiff tapes free many large blocks per step; keep them in the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Tri-plane head synthesis with teacher-student distillation"};
  app.require_subcommand(1);

  // dataset gen
  DatasetArgs ds;
  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
  dataset->require_subcommand(1);
  auto* gen = dataset->add_subcommand("gen", "Generate the face and head splits");
  gen->add_option("--faces", ds.opt.faces, "Front-view face images")->capture_default_str();
  gen->add_option("--heads", ds.opt.heads, "Multi-view head identities")->capture_default_str();
  gen->add_option("--views", ds.opt.views, "Views per head identity")->capture_default_str();
  gen->add_option("--res", ds.opt.res, "Image resolution")->capture_default_str();
  gen->add_option("--seed", ds.opt.seed, "Dataset seed")->capture_default_str();
  gen->add_option("--accessory-prob", ds.opt.accessory_prob, "Probability of a hat band")->capture_default_str();
  gen->add_option("--out", ds.out, "Output directory")->required();

  // train
  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Run one training phase");
  trn->add_option("phase", ta.phase, "teacher, finetune or distill")
      ->required()
      ->check(CLI::IsMember({"teacher", "finetune", "distill"}));
  trn->add_option("--config", ta.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  trn->add_option("--data", ta.data, "Dataset directory");
  trn->add_option("--out", ta.out, "Output directory")->required();
  trn->add_option("--seed", ta.seed, "Override the config seed");
  trn->add_option("--steps", ta.steps, "Override this phase's step count");
  trn->add_option("--stop-at", ta.stop_at, "Stop (and checkpoint) at this step");
  trn->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
  trn->add_option("--teacher", ta.teacher, "Teacher checkpoint")->check(CLI::ExistingFile);
  trn->add_option("--head", ta.head, "Fine-tuned head checkpoint")->check(CLI::ExistingFile);
  trn->add_option("--resume", ta.resume, "Resume from a checkpoint of the same phase")->check(CLI::ExistingFile);
  trn->add_flag("--no-kd", ta.no_kd, "Disable the xy-plane and style distillation terms");
  trn->add_flag("--no-gan-front", ta.no_gan_front, "Disable the front adversarial term");
  trn->add_flag("--no-rgb-lpips", ta.no_rgb_lpips, "Disable the reconstruction terms");
  trn->add_flag("--full-triplane-kd", ta.full_kd, "Distill all three planes");
  trn->add_flag("--single-discriminator", ta.single_d, "Route every real batch to one discriminator");
  trn->add_flag("--swap-only", ta.swap_only, "Render the head generator with the teacher xy-plane, no training");

  // swap
  std::string ckpt_a, ckpt_b, out_dir;
  std::size_t identities = 7, pairs = 20, n_samples = 100, steps = 8, count = 8;
  std::uint64_t seed = 0, seed_b = 1;
  std::vector<std::string> plane_names{"xy", "xz", "yz"};
  auto* swap = app.add_subcommand("swap", "Per-plane swap experiment over unordered identity pairs");
  swap->add_option("--ckpt", ckpt_a, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  swap->add_option("--donor-ckpt", ckpt_b, "Second generator supplying donor planes")->check(CLI::ExistingFile);
  swap->add_option("--identities", identities, "Identities (pairs = n (n - 1) / 2)")->capture_default_str();
  swap->add_option("--planes", plane_names, "Planes to swap")->delimiter(',')->capture_default_str();
  swap->add_option("--seed", seed, "Latent seed")->capture_default_str();
  swap->add_option("--out", out_dir, "Report directory");

  std::string face_ckpt, head_ckpt;
  auto* cross = app.add_subcommand("cross-swap", "Give head tri-planes the face generator's xy-plane");
  cross->add_option("--face", face_ckpt, "Face generator checkpoint")->required()->check(CLI::ExistingFile);
  cross->add_option("--head", head_ckpt, "Head generator checkpoint")->required()->check(CLI::ExistingFile);
  cross->add_option("--pairs", pairs, "Samples")->capture_default_str();
  cross->add_option("--seed", seed, "Latent seed")->capture_default_str();
  cross->add_option("--out", out_dir, "Report directory");

  double yaw = 0, pitch = 0;
  std::string out_png;
  auto* interp = app.add_subcommand("interp", "Style-space interpolation strip");
  interp->add_option("--ckpt", ckpt_a, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  interp->add_option("--seed-a", seed, "Seed of z1")->capture_default_str();
  interp->add_option("--seed-b", seed_b, "Seed of z2")->capture_default_str();
  interp->add_option("--steps", steps, "Frames")->capture_default_str()->check(CLI::Range(2, 1000));
  interp->add_option("--yaw", yaw, "Camera yaw")->capture_default_str();
  interp->add_option("--pitch", pitch, "Camera pitch")->capture_default_str();
  interp->add_option("--out", out_png, "Output PNG")->required();

  std::string data_dir, teacher_ckpt;
  auto* eval = app.add_subcommand("eval", "Feature distance to the face split and identity consistency");
  eval->add_option("--ckpt", ckpt_a, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--samples", n_samples, "Generated and real samples")->capture_default_str();
  eval->add_option("--teacher", teacher_ckpt, "Teacher checkpoint for identity consistency")->check(CLI::ExistingFile);
  eval->add_option("--seed", seed, "Latent seed")->capture_default_str();
  eval->add_option("--out", out_dir, "Report directory");

  std::vector<double> yaws{0.0, render::kPi / 2, render::kPi};
  auto* rnd = app.add_subcommand("render", "Grid of samples, one row per yaw");
  rnd->add_option("--ckpt", ckpt_a, "Generator checkpoint")->required()->check(CLI::ExistingFile);
  rnd->add_option("--count", count, "Samples per row")->capture_default_str();
  rnd->add_option("--yaw", yaws, "Camera yaws")->delimiter(',');
  rnd->add_option("--seed", seed, "Latent seed")->capture_default_str();
  rnd->add_option("--out", out_png, "Output PNG")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto m = data::generate(ds.opt, ds.out);
      std::printf("wrote %zu faces and %zu head views to %s\n", m.count(data::Split::kFace), m.count(data::Split::kHead),
                  ds.out.c_str());
    } else if (trn->parsed()) {
      return run_train(ta);
    } else if (swap->parsed()) {
      auto a = generator_from(ckpt_a);
      std::unique_ptr<nn::Generator> b;
      if (!ckpt_b.empty()) b = generator_from(ckpt_b);
      const auto rep = analysis::swap_experiment(*a, b.get(), identities, seed, parse_planes(plane_names));
      emit_report(out_dir, "swap", rep.text(), rep.csv());
    } else if (cross->parsed()) {
      auto face = generator_from(face_ckpt), head = generator_from(head_ckpt);
      const auto rep = analysis::cross_model_swap(*face, *head, pairs, seed);
      emit_report(out_dir, "cross_swap", rep.text(), rep.csv());
      if (!out_dir.empty()) analysis::emit_grid(rep.grid, 5, pairs, fs::path(out_dir) / "cross_swap.png");
    } else if (interp->parsed()) {
      auto g = generator_from(ckpt_a);
      const auto dz = g->config().z_dim;
      render::CameraPose pose;
      pose.yaw = yaw;
      pose.pitch = pitch;
      pose.validate();
      const auto strip = analysis::interpolate(*g, analysis::latents(seed, 1, dz).reshaped(ad::Shape{dz}),
                                               analysis::latents(seed_b, 1, dz).reshaped(ad::Shape{dz}), steps, pose);
      analysis::emit_grid(analysis::unbatch(strip), 1, steps, out_png);
    } else if (eval->parsed()) {
      auto g = generator_from(ckpt_a);
      std::unique_ptr<nn::Generator> t;
      if (!teacher_ckpt.empty()) t = generator_from(teacher_ckpt);
      const auto manifest = data::DatasetManifest::read(fs::path(data_dir) / "manifest.txt");
      const auto real = data::load_split(data_dir, manifest, data::Split::kFace, g->config().image_res());
      const auto rep = analysis::eval_feature_distance(*g, real, n_samples, seed, t.get());
      emit_report(out_dir, "eval", rep.text(), rep.csv());
    } else if (rnd->parsed()) {
      auto g = generator_from(ckpt_a);
      const auto p = analysis::planes_from_z(*g, analysis::latents(seed, count, g->config().z_dim));
      std::vector<ad::Tensor<float>> cells;
      for (double y : yaws) {
        render::CameraPose cam;
        cam.yaw = render::wrap_angle(y);
        cam.validate();
        for (auto& im : analysis::unbatch(analysis::render(*g, p, cam).images)) cells.push_back(std::move(im));
      }
      analysis::emit_grid(cells, yaws.size(), count, out_png);
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
