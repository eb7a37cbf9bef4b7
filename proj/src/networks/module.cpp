// SPDX-License-Identifier: Apache-2.0
#include "tpd/networks/module.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace tpd::nn {

std::vector<ad::Parameter*> Module::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const ad::Parameter*> Module::parameters() const {
  std::vector<const ad::Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t Module::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ad::Parameter* Module::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void Module::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Module::copy_weights_from(const Module& other) {
  if (other.params_.size() != params_.size()) {
    throw std::invalid_argument("copy_weights_from: parameter count " + std::to_string(other.params_.size()) + " vs " +
                                std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = other.params_[i];
    auto& dst = params_[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw std::invalid_argument("copy_weights_from: architecture mismatch at " + dst.name + " " +
                                  ad::shape_str(dst.value.shape()) + " vs " + src.name + " " + ad::shape_str(src.value.shape()));
    }
    dst.value = src.value;
  }
}

std::uint64_t Module::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    feed(p.name.data(), p.name.size());
    for (std::size_t d : p.value.shape()) {
      const auto v = static_cast<std::uint64_t>(d);
      feed(&v, sizeof v);
    }
    for (float f : p.value.data()) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      feed(&bits, sizeof bits);
    }
  }
  return h;
}

std::size_t Module::add_param(std::string name, ad::Tensor<float> init) {
  for (const auto& p : params_)
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  params_.emplace_back(std::move(name), std::move(init));
  return params_.size() - 1;
}

ad::Tensor<float> normal_init(ad::Shape shape, Rng& rng, double stddev) {
  ad::Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(stddev * rng.normal());
  return t;
}

ad::Tensor<float> uniform_init(ad::Shape shape, Rng& rng, double bound) {
  ad::Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace tpd::nn
