#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/tensor.hpp"

namespace tssan {

/// Insertion-ordered registry of named trainable tensors.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t) {
    if (find(name)) throw ConfigError("param store: duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const Tensor* find(std::string_view name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  const Tensor& at(std::string_view name) const {
    const Tensor* t = find(name);
    if (!t) throw IndexError("param store: no parameter '" + std::string(name) + "'");
    return *t;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  std::size_t count_with_prefix(std::string_view prefix) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (std::string_view(e.first).starts_with(prefix)) ++n;
    }
    return n;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace init {

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                             std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor constant(Shape shape, double value) { return Tensor(std::move(shape), value); }

}  // namespace init

}  // namespace tssan
