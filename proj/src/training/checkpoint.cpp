// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tpd/training/training.hpp"

namespace tpd::train {
namespace {

constexpr char kMagic[4] = {'T', 'P', 'D', '1'};
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint32_t kMaxName = 4096;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  void text(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : buf_(std::move(data)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text() { return bytes(u64()); }
  std::uint64_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw CorruptCheckpoint("checkpoint: truncated file");
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

const NamedTensor* find(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts)
    if (t.name == name) return &t;
  return nullptr;
}

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kTeacher: return "teacher";
    case Phase::kFinetune: return "finetune";
    case Phase::kDistill: return "distill";
  }
  return "?";
}

void Checkpoint::put(const std::string& prefix, const nn::Module& m) {
  for (const auto* p : m.parameters()) tensors.push_back({prefix + p->name, p->value});
}

void Checkpoint::get(const std::string& prefix, nn::Module& m) const {
  for (auto* p : m.parameters()) {
    const auto* t = find(tensors, prefix + p->name);
    if (!t) throw ShapeMismatch("checkpoint: missing tensor " + prefix + p->name);
    if (t->value.shape() != p->value.shape()) {
      throw ShapeMismatch("checkpoint: tensor " + t->name + " has shape " + ad::shape_str(t->value.shape()) + ", expected " +
                          ad::shape_str(p->value.shape()));
    }
    p->value = t->value;
  }
}

bool Checkpoint::has(const std::string& prefix) const {
  for (const auto& t : tensors)
    if (t.name.rfind(prefix, 0) == 0) return true;
  return false;
}

void Checkpoint::put(const std::string& prefix, const ad::AdamState& s) {
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    tensors.push_back({prefix + "m." + std::to_string(i), s.first_moment[i]});
    tensors.push_back({prefix + "v." + std::to_string(i), s.second_moment[i]});
  }
  counters.emplace_back(prefix + "step", s.step);
}

void Checkpoint::get(const std::string& prefix, ad::AdamState& s) const {
  auto load = [&](const std::string& name, ad::Tensor<float>& dst) {
    const auto* t = find(tensors, name);
    if (!t) throw ShapeMismatch("checkpoint: missing tensor " + name);
    if (t->value.shape() != dst.shape()) throw ShapeMismatch("checkpoint: tensor " + name + " has the wrong shape");
    dst = t->value;
  };
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    load(prefix + "m." + std::to_string(i), s.first_moment[i]);
    load(prefix + "v." + std::to_string(i), s.second_moment[i]);
  }
  s.step = counter(prefix + "step");
}

std::uint64_t Checkpoint::counter(const std::string& name) const {
  for (const auto& [k, v] : counters)
    if (k == name) return v;
  throw CorruptCheckpoint("checkpoint: missing counter " + name);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(Checkpoint::kVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.phase));
  w.u64(ckpt.step);
  w.text(ckpt.config.serialize());
  w.u64(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.u64(d);
    for (float v : t.value.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  std::string state = "rng " + ckpt.rng_state + "\n";
  for (const auto& [k, v] : ckpt.counters) state += "counter " + k + " " + std::to_string(v) + "\n";
  w.text(state);

  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    os.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
    if (!os) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, file, ec);
  if (ec) throw CheckpointError("checkpoint: cannot move into place " + file.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  Reader r(ss.str());

  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kMagic, 4)) throw CorruptCheckpoint("checkpoint: bad magic in " + file.string());
  const auto version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw VersionMismatch("checkpoint: format version " + std::to_string(version) + ", expected " + std::to_string(Checkpoint::kVersion));
  }
  Checkpoint c;
  const auto phase = r.u32();
  if (phase < 1 || phase > 3) throw CorruptCheckpoint("checkpoint: unknown phase " + std::to_string(phase));
  c.phase = static_cast<Phase>(phase);
  c.step = r.u64();
  try {
    c.config = TrainConfig::parse(r.text());
  } catch (const ConfigError& e) {
    throw CorruptCheckpoint(std::string("checkpoint: bad config snapshot: ") + e.what());
  }
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = r.u32();
    if (len == 0 || len > kMaxName) throw CorruptCheckpoint("checkpoint: bad tensor name length");
    NamedTensor t;
    t.name = r.bytes(len);
    const auto rank = r.u32();
    if (rank > kMaxRank) throw CorruptCheckpoint("checkpoint: bad rank for " + t.name);
    ad::Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || count > r.remaining() / d) throw CorruptCheckpoint("checkpoint: bad shape for " + t.name);
      count *= d;
    }
    if (count * 4 > r.remaining()) throw CorruptCheckpoint("checkpoint: truncated payload for " + t.name);
    t.value = ad::Tensor<float>(shape);
    for (std::uint64_t k = 0; k < count; ++k) t.value[k] = std::bit_cast<float>(r.u32());
    c.tensors.push_back(std::move(t));
  }
  std::istringstream state(r.text());
  if (r.remaining() != 0) throw CorruptCheckpoint("checkpoint: trailing bytes");
  std::string line;
  bool have_rng = false;
  while (std::getline(state, line)) {
    if (line.rfind("rng ", 0) == 0) {
      c.rng_state = line.substr(4);
      have_rng = true;
    } else if (line.rfind("counter ", 0) == 0) {
      std::istringstream ls(line.substr(8));
      std::string k;
      std::uint64_t v = 0;
      if (!(ls >> k >> v)) throw CorruptCheckpoint("checkpoint: bad counter line");
      c.counters.emplace_back(k, v);
    } else if (!line.empty()) {
      throw CorruptCheckpoint("checkpoint: unknown state line");
    }
  }
  if (!have_rng) throw CorruptCheckpoint("checkpoint: missing RNG state");
  return c;
}

}  // namespace tpd::train
