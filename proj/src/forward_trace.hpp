#pragma once

// Intermediates of one forward pass that the hand-written backward pass needs.
// Shared between model.cpp (which fills it) and trainer.cpp (which consumes it).

#include <cmath>
#include <vector>

#include "parenlens/model.hpp"

namespace parenlens::detail {

template <typename T>
struct HeadTrace {
  Tensor<T> q_rot, k_rot, v;  // seq × d_head
  Tensor<T> pattern;          // seq × seq
};

template <typename T>
struct LayerTrace {
  Tensor<T> x_in;   // resid_pre
  std::vector<T> rms1;
  Tensor<T> h1;     // norm1 output
  std::vector<HeadTrace<T>> heads;
  Tensor<T> z;      // concatenated head outputs before W_O
  Tensor<T> x_mid;
  std::vector<T> rms2;
  Tensor<T> h2;
  Tensor<T> gate_pre, up_out, act;  // seq × d_ff
};

template <typename T>
struct ForwardTrace {
  std::vector<int> positions;
  std::vector<LayerTrace<T>> layers;
  Tensor<T> x_final;
  std::vector<T> rms_final;
  Tensor<T> h_final;
};

template <typename T>
Tensor<T> run_forward(const ModelWeights<T>& weights, const ModelConfig& config,
                      const std::vector<TokenId>& tokens, ActivationCache<T>* cache,
                      ForwardTrace<T>* trace);

template <typename T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <typename T>
T silu_grad(T x) {
  const T s = T{1} / (T{1} + std::exp(-x));
  return s * (T{1} + x * (T{1} - s));
}

}  // namespace parenlens::detail
