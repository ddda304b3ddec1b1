#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "parenlens/tensor.hpp"

namespace parenlens {

using TokenId = std::int32_t;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 8;
  int d_model = 128;
  int d_head = 16;
  int d_ff = 512;
  int vocab_size = 64;
  int context_len = 64;
  double norm_eps = 1e-5;
  double rope_theta = 10000.0;

  /// The default experiment size: 4 layers, 8 heads of 16, d_ff 512.
  static ModelConfig tiny_default(int vocab_size);

  /// Throws ConfigError. n_layers may be 0 (embedding straight into the
  /// unembedding); every other field must be positive and n_heads·d_head
  /// must equal d_model.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv;  // d_model × d_model, head h owns columns [h·d_head, (h+1)·d_head)
  Tensor<T> wo;          // d_model × d_model, head h owns rows [h·d_head, (h+1)·d_head)
  Tensor<T> norm1, norm2;
  Tensor<T> gate, up;  // d_model × d_ff
  Tensor<T> down;      // d_ff × d_model
};

template <typename T>
struct ModelWeights {
  Tensor<T> embed;  // vocab × d_model
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> unembed;  // d_model × vocab
};

/// Visits every tensor in canonical order with its MIW1 name
/// (`embed`, `layers.{l}.attn.wq`, ..., `final_norm`, `unembed`).
template <typename T>
void for_each_tensor(ModelWeights<T>& w, const std::function<void(const std::string&, Tensor<T>&)>& fn);
template <typename T>
void for_each_tensor(const ModelWeights<T>& w,
                     const std::function<void(const std::string&, const Tensor<T>&)>& fn);

/// All-zero weights with the shapes `config` implies.
template <typename T>
ModelWeights<T> zeros_like_config(const ModelConfig& config);

/// Throws ShapeError naming the first tensor whose shape disagrees with config.
template <typename T>
void check_shapes(const ModelWeights<T>& w, const ModelConfig& config);

template <typename To, typename From>
ModelWeights<To> cast_weights(const ModelWeights<From>& w) {
  ModelWeights<To> out;
  out.embed = cast<To>(w.embed);
  out.final_norm = cast<To>(w.final_norm);
  out.unembed = cast<To>(w.unembed);
  for (const auto& l : w.layers) {
    out.layers.push_back({cast<To>(l.wq), cast<To>(l.wk), cast<To>(l.wv), cast<To>(l.wo),
                          cast<To>(l.norm1), cast<To>(l.norm2), cast<To>(l.gate), cast<To>(l.up),
                          cast<To>(l.down)});
  }
  return out;
}

/// Normal(0, 0.02) weights, output projections (wo, down) additionally scaled
/// by 1/sqrt(2·n_layers); norm gains start at one. Same seed, same bits.
template <typename T>
ModelWeights<T> init_random(const ModelConfig& config, std::uint64_t seed);

template <typename T>
struct LayerCache {
  Tensor<T> resid_pre;               // seq × d_model
  Tensor<T> attn_pattern;            // n_heads × seq × seq
  std::vector<Tensor<T>> head_out;   // per head, seq × d_model (already through W_O)
  Tensor<T> attn_out;                // seq × d_model
  Tensor<T> resid_mid;               // resid_pre + attn_out
  Tensor<T> mlp_out;                 // seq × d_model
  Tensor<T> resid_post;              // resid_mid + mlp_out
};

/// Everything one forward pass produced, for a single token sequence.
template <typename T>
struct ActivationCache {
  std::vector<TokenId> tokens;
  Tensor<T> embed;  // equals layers[0].resid_pre when n_layers > 0
  std::vector<LayerCache<T>> layers;
  Tensor<T> final_resid;
  std::vector<T> final_rms;  // sqrt(mean(final_resid²) + eps) per position
  Tensor<T> logits;          // seq × vocab

  std::size_t seq_len() const { return tokens.size(); }
};

enum class CacheMode { kNone, kFull };

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<ActivationCache<T>> cache;
};

template <typename T>
ForwardResult<T> forward(const ModelWeights<T>& weights, const ModelConfig& config,
                         const std::vector<TokenId>& tokens, CacheMode mode = CacheMode::kNone);

/// Greedy argmax of the final-position logits, ties to the lowest id.
template <typename T>
TokenId next_token(const ModelWeights<T>& weights, const ModelConfig& config,
                   const std::vector<TokenId>& tokens);

template <typename T>
TokenId argmax_lowest(std::span<const T> v);

}  // namespace parenlens
