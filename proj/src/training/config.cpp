// SPDX-License-Identifier: Apache-2.0
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "tpd/training/training.hpp"

namespace tpd::train {
namespace {

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  } else {
    return std::to_string(v);
  }
}

template <typename T>
void parse_value(const std::string& key, std::string_view text, T& out) {
  const std::string s(text);
  auto bad = [&] { return ConfigError("config: bad value '" + s + "' for " + key); };
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") {
      out = true;
    } else if (s == "false" || s == "0") {
      out = false;
    } else {
      throw bad();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (s.empty()) throw bad();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || errno != 0 || !std::isfinite(v)) throw bad();
    out = v;
  } else {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw bad();
    out = v;
  }
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
};

template <typename Ref>
Field make_field(std::string key, Ref ref) {
  return {key, [ref](const TrainConfig& c) { return format_value(ref(const_cast<TrainConfig&>(c))); },
          [ref, key](TrainConfig& c, std::string_view v) { parse_value(key, v, ref(c)); }};
}

#define TPD_FIELD(key, member) make_field(key, [](TrainConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      TPD_FIELD("g.z_dim", generator.z_dim),
      TPD_FIELD("g.w_dim", generator.w_dim),
      TPD_FIELD("g.mapping_layers", generator.mapping_layers),
      TPD_FIELD("g.backbone_channels", generator.backbone_channels),
      TPD_FIELD("g.plane_channels", generator.plane_channels),
      TPD_FIELD("g.plane_res", generator.plane_res),
      TPD_FIELD("g.decoder_hidden", generator.decoder_hidden),
      TPD_FIELD("g.feature_channels", generator.feature_channels),
      TPD_FIELD("g.raw_res", generator.raw_res),
      TPD_FIELD("g.samples", generator.samples),
      TPD_FIELD("g.sr_channels", generator.sr_channels),
      TPD_FIELD("d.base_channels", discriminator.base_channels),
      TPD_FIELD("d.max_channels", discriminator.max_channels),
      TPD_FIELD("d.hidden", discriminator.hidden),
      TPD_FIELD("d.pose_embed", discriminator.pose_embed),
      TPD_FIELD("d.mbstd_group", discriminator.mbstd_group),
      TPD_FIELD("loss.gan_front", weights.gan_front),
      TPD_FIELD("loss.kd", weights.kd),
      TPD_FIELD("loss.rgb", weights.rgb),
      TPD_FIELD("loss.lpips", weights.lpips),
      TPD_FIELD("loss.map", weights.map),
      TPD_FIELD("loss.gan_back", weights.gan_back),
      TPD_FIELD("loss.tau", weights.tau),
      TPD_FIELD("loss.gamma_front", weights.gamma_front),
      TPD_FIELD("loss.gamma_back", weights.gamma_back),
      TPD_FIELD("batch", batch),
      TPD_FIELD("recon_batch", recon_batch),
      TPD_FIELD("recon_yaw_range", recon_yaw_range),
      TPD_FIELD("pretrain_steps", pretrain_steps),
      TPD_FIELD("finetune_steps", finetune_steps),
      TPD_FIELD("distill_steps", distill_steps),
      TPD_FIELD("lr_g_phase1", lr_g_phase1),
      TPD_FIELD("lr_d_phase1", lr_d_phase1),
      TPD_FIELD("gamma_phase1", gamma_phase1),
      TPD_FIELD("lr_g_phase2", lr_g_phase2),
      TPD_FIELD("lr_d_phase2", lr_d_phase2),
      TPD_FIELD("front_prob", front_prob),
      TPD_FIELD("kd_all_planes", kd_all_planes),
      TPD_FIELD("single_discriminator", single_discriminator),
      TPD_FIELD("log_every", log_every),
      TPD_FIELD("checkpoint_every", checkpoint_every),
      TPD_FIELD("seed", seed),
  };
  return f;
}

#undef TPD_FIELD

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

std::string TrainConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    const auto key = trim(line.substr(0, eq));
    if (!seen.insert(std::string(key)).second) throw ConfigError("config: key '" + std::string(key) + "' repeated");
    try {
      cfg.set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("config: cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

nn::DiscriminatorConfig TrainConfig::discriminator_config() const {
  auto d = discriminator;
  d.resolution = generator.image_res();
  return d;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("config: ") + what);
  };
  for (double lr : {lr_g_phase1, lr_d_phase1, lr_g_phase2, lr_d_phase2}) need(lr > 0.0, "learning rates must be positive");
  need(front_prob > 0.0 && front_prob < 1.0, "front_prob must lie in (0, 1)");
  need(gamma_phase1 >= 0.0, "gamma_phase1 must be non-negative");
  need(batch >= 1, "batch must be at least 1");
  need(batch % discriminator.mbstd_group == 0, "batch must be a multiple of d.mbstd_group");
  need(recon_batch >= 1 && recon_batch <= batch, "recon_batch must lie in [1, batch]");
  need(recon_yaw_range > 0.0 && recon_yaw_range <= render::kPi, "recon_yaw_range must lie in (0, pi]");
  need(log_every >= 1 && checkpoint_every >= 1, "log_every and checkpoint_every must be positive");
  const std::size_t res = generator.image_res();
  need(res >= 32 && (res & (res - 1)) == 0, "output resolution (2 g.raw_res) must be a power of two >= 32");
  try {
    generator.validate();
    discriminator_config().validate();
    weights.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace tpd::train
