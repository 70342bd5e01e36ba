#pragma once

#include <cstdint>

#include "mtn/tensor.hpp"

namespace mtn {

/// Bias-corrected Adam moments over one flat parameter array.
template <typename S>
struct AdamState {
  ArrayX<S> m;
  ArrayX<S> v;
  std::int64_t step = 0;
  S lr = S(1e-5);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);

  explicit AdamState(Eigen::Index n = 0, S lr_ = S(1e-5))
      : m(ArrayX<S>::Zero(n)), v(ArrayX<S>::Zero(n)), lr(lr_) {}
};

template <typename S>
void adam_step(ArrayX<S>& params, const ArrayX<S>& grads, AdamState<S>& state) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "adam_step: optimizer state size mismatch");
  state.step += 1;
  state.m = state.beta1 * state.m + (S(1) - state.beta1) * grads;
  state.v = state.beta2 * state.v + (S(1) - state.beta2) * grads.square();
  const S c1 = S(1) - static_cast<S>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step)));
  const S c2 = S(1) - static_cast<S>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step)));
  params -= state.lr * (state.m / c1) / ((state.v / c2).sqrt() + state.eps);
}

}  // namespace mtn
