#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/tensor.hpp"

namespace tssan {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for a fixed, ordered parameter list.
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  AdamState() = default;
  explicit AdamState(std::span<const Tensor> params, AdamOptions opts = {})
      : options(opts) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.numel(), 0.0);
      second_moment.emplace_back(p.numel(), 0.0);
    }
  }
};

/// One bias-corrected Adam update. Weight decay enters as the additive
/// gradient term weight_decay * theta.
inline void adam_step(std::span<Tensor> params, AdamState& state, double lr,
                      double weight_decay) {
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adam_step: state tracks " +
                        std::to_string(state.first_moment.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.first_moment[i].size() != params[i].numel()) {
      throw ContractError("adam_step: moment shape mismatch at parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].values();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] + weight_decay * theta[j];
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g;
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

}  // namespace tssan
