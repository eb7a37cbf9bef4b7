// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "tpd/autodiff/tape.hpp"
#include "tpd/core/rng.hpp"

namespace tpd::nn {

/// Owns a flat, ordered list of named parameters. Layers refer to parameters
/// by index, so copying a module yields an independent deep copy.
class Module {
 public:
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  ad::Parameter& param(std::size_t i) { return params_.at(i); }
  const ad::Parameter& param(std::size_t i) const { return params_.at(i); }
  std::size_t num_parameters() const { return params_.size(); }
  std::size_t num_scalars() const;

  /// nullptr when absent.
  ad::Parameter* find(const std::string& name);

  void zero_grad();

  /// Deep copy of all values. Throws std::invalid_argument on any name or
  /// shape mismatch.
  void copy_weights_from(const Module& other);

  /// FNV-1a over parameter names, shapes and little-endian value bytes.
  std::uint64_t digest() const;

 protected:
  std::size_t add_param(std::string name, ad::Tensor<float> init);

 private:
  std::deque<ad::Parameter> params_;
};

/// Binds module parameters onto one tape. Each parameter is bound at most
/// once; set() substitutes an arbitrary node, which is how gradient checks
/// reach network weights.
template <typename T>
class Bind {
 public:
  Bind(ad::Tape<T>& tape, ad::Mode mode) : tape_(&tape), mode_(mode) {}

  ad::Var<T> operator()(ad::Parameter& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(&p, tape_->parameter(p, mode_)).first->second;
  }

  void set(const ad::Parameter& p, ad::Var<T> v) { cache_[&p] = v; }

  ad::Tape<T>& tape() const { return *tape_; }
  ad::Mode mode() const { return mode_; }

 private:
  ad::Tape<T>* tape_;
  ad::Mode mode_;
  std::unordered_map<const ad::Parameter*, ad::Var<T>> cache_;
};

ad::Tensor<float> normal_init(ad::Shape shape, Rng& rng, double stddev = 1.0);
ad::Tensor<float> uniform_init(ad::Shape shape, Rng& rng, double bound);

}  // namespace tpd::nn
