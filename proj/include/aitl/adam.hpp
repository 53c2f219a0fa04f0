#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "aitl/tensor.hpp"

namespace aitl {

struct AdamState {
  Tensor m;  // first moment
  Tensor v;  // second moment
  int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const std::vector<int>& shape) : m(Tensor::zeros(shape)), v(Tensor::zeros(shape)) {}
};

/// One Adam step (beta1=0.9, beta2=0.999, eps=1e-8, bias correction).
/// Rejects non-finite gradients, naming the offending parameter block.
inline void adam_update(Tensor& params, const Tensor& grads, AdamState& state, float lr,
                        const std::string& block = "params") {
  if (!params.same_shape(grads)) throw std::invalid_argument("adam_update: shape mismatch in block " + block);
  if (state.m.numel() == 0) state = AdamState(params.shape);
  if (!state.m.same_shape(params)) throw std::invalid_argument("adam_update: state shape mismatch in block " + block);
  for (size_t i = 0; i < grads.data.size(); ++i)
    if (!std::isfinite(grads.data[i]))
      throw std::runtime_error("adam_update: non-finite gradient in block " + block + " at index " +
                               std::to_string(i));

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.data.size(); ++i) {
    double g = grads.data[i];
    double m = beta1 * state.m.data[i] + (1.0 - beta1) * g;
    double v = beta2 * state.v.data[i] + (1.0 - beta2) * g * g;
    state.m.data[i] = static_cast<float>(m);
    state.v.data[i] = static_cast<float>(v);
    params.data[i] -= static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
  }
}

}  // namespace aitl
