#include "parenlens/model.hpp"

#include <cmath>
#include <random>

#include "forward_trace.hpp"

namespace parenlens {

ModelConfig ModelConfig::tiny_default(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  if (n_layers < 0) throw ConfigError("model config: n_layers must be non-negative");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(context_len, "context_len");
  if (!(norm_eps > 0)) throw ConfigError("model config: norm_eps must be positive");
  if (!(rope_theta > 0)) throw ConfigError("model config: rope_theta must be positive");
  if (n_heads * d_head != d_model) {
    throw ConfigError("model config: n_heads * d_head (" + std::to_string(n_heads * d_head) +
                      ") != d_model (" + std::to_string(d_model) + ")");
  }
  if (d_head % 2 != 0) throw ConfigError("model config: d_head must be even for rotary encoding");
}

template <typename T>
void for_each_tensor(ModelWeights<T>& w, const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("embed", w.embed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "attn.wq", L.wq);
    fn(p + "attn.wk", L.wk);
    fn(p + "attn.wv", L.wv);
    fn(p + "attn.wo", L.wo);
    fn(p + "norm1", L.norm1);
    fn(p + "norm2", L.norm2);
    fn(p + "mlp.gate", L.gate);
    fn(p + "mlp.up", L.up);
    fn(p + "mlp.down", L.down);
  }
  fn("final_norm", w.final_norm);
  fn("unembed", w.unembed);
}

template <typename T>
void for_each_tensor(const ModelWeights<T>& w,
                     const std::function<void(const std::string&, const Tensor<T>&)>& fn) {
  for_each_tensor<T>(const_cast<ModelWeights<T>&>(w),
                     [&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

template <typename T>
ModelWeights<T> zeros_like_config(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  ModelWeights<T> w;
  w.embed = Tensor<T>({v, d});
  for (int l = 0; l < config.n_layers; ++l) {
    w.layers.push_back({Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}),
                        Tensor<T>({d}), Tensor<T>({d}), Tensor<T>({d, ff}), Tensor<T>({d, ff}),
                        Tensor<T>({ff, d})});
  }
  w.final_norm = Tensor<T>({d});
  w.unembed = Tensor<T>({d, v});
  return w;
}

template <typename T>
void check_shapes(const ModelWeights<T>& w, const ModelConfig& config) {
  if (w.layers.size() != static_cast<std::size_t>(config.n_layers)) {
    throw ShapeError("weights have " + std::to_string(w.layers.size()) + " layers, config says " +
                     std::to_string(config.n_layers));
  }
  auto expected = zeros_like_config<T>(config);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> want;
  for_each_tensor<T>(expected, [&](const std::string& n, Tensor<T>& t) { want.emplace_back(n, t.shape()); });
  std::size_t i = 0;
  for_each_tensor<T>(w, [&](const std::string& n, const Tensor<T>& t) {
    if (t.shape() != want[i].second) {
      throw ShapeError("tensor " + n + " has shape " + shape_to_string(t.shape()) + ", expected " +
                       shape_to_string(want[i].second));
    }
    ++i;
  });
}

template <typename T>
ModelWeights<T> init_random(const ModelConfig& config, std::uint64_t seed) {
  auto w = zeros_like_config<T>(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double out_scale = config.n_layers > 0 ? 1.0 / std::sqrt(2.0 * config.n_layers) : 1.0;
  for_each_tensor<T>(w, [&](const std::string& name, Tensor<T>& t) {
    const bool gain = name.ends_with("norm1") || name.ends_with("norm2") || name == "final_norm";
    if (gain) {
      for (auto& x : t.data()) x = T{1};
      return;
    }
    const bool output_proj = name.ends_with("attn.wo") || name.ends_with("mlp.down");
    const double scale = output_proj ? out_scale : 1.0;
    for (auto& x : t.data()) x = static_cast<T>(normal(rng) * scale);
  });
  return w;
}

namespace detail {

template <typename T>
Tensor<T> run_forward(const ModelWeights<T>& weights, const ModelConfig& config,
                      const std::vector<TokenId>& tokens, ActivationCache<T>* cache,
                      ForwardTrace<T>* trace) {
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config.context_len)) {
    throw InvalidArgument("forward: sequence of " + std::to_string(tokens.size()) +
                          " tokens exceeds context length " + std::to_string(config.context_len));
  }
  for (auto t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InvalidArgument("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(config.vocab_size));
    }
  }
  const std::size_t seq = tokens.size();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const auto n_heads = static_cast<std::size_t>(config.n_heads);
  const T eps = static_cast<T>(config.norm_eps);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<int> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = static_cast<int>(i);

  Tensor<T> x({seq, d});
  for (std::size_t i = 0; i < seq; ++i) {
    auto src = weights.embed.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  if (cache) {
    cache->tokens = tokens;
    cache->embed = x;
    cache->layers.clear();
  }
  if (trace) {
    trace->positions = positions;
    trace->layers.clear();
  }

  for (const auto& L : weights.layers) {
    LayerCache<T>* lc = nullptr;
    if (cache) {
      cache->layers.emplace_back();
      lc = &cache->layers.back();
      lc->resid_pre = x;
      lc->attn_pattern = Tensor<T>({n_heads, seq, seq});
    }
    LayerTrace<T>* lt = nullptr;
    if (trace) {
      trace->layers.emplace_back();
      lt = &trace->layers.back();
      lt->x_in = x;
    }

    auto rms1 = row_rms(x, eps);
    auto h1 = scale_by_rms(x, std::span<const T>(rms1), L.norm1);
    auto q = matmul(h1, L.wq);
    auto k = matmul(h1, L.wk);
    auto v = matmul(h1, L.wv);
    Tensor<T> z({seq, d});
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto qr = rope_apply(column_block(q, h * dh, dh), positions, config.rope_theta);
      auto kr = rope_apply(column_block(k, h * dh, dh), positions, config.rope_theta);
      auto vh = column_block(v, h * dh, dh);
      auto scores = matmul_nt(qr, kr);
      for (auto& s : scores.data()) s *= scale;
      auto p = softmax_rows(scores, true);
      auto zh = matmul(p, vh);
      set_column_block(z, h * dh, zh);
      if (lc) {
        std::copy(p.data().begin(), p.data().end(), lc->attn_pattern.data().begin() + h * seq * seq);
        lc->head_out.push_back(matmul(zh, row_block(L.wo, h * dh, dh)));
      }
      if (lt) lt->heads.push_back({std::move(qr), std::move(kr), std::move(vh), std::move(p)});
    }
    auto attn_out = matmul(z, L.wo);
    auto x_mid = add(x, attn_out);

    auto rms2 = row_rms(x_mid, eps);
    auto h2 = scale_by_rms(x_mid, std::span<const T>(rms2), L.norm2);
    auto gate_pre = matmul(h2, L.gate);
    auto up_out = matmul(h2, L.up);
    Tensor<T> act(gate_pre.shape());
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(gate_pre[i]) * up_out[i];
    auto mlp_out = matmul(act, L.down);
    auto x_post = add(x_mid, mlp_out);

    if (lc) {
      lc->attn_out = attn_out;
      lc->resid_mid = x_mid;
      lc->mlp_out = mlp_out;
      lc->resid_post = x_post;
    }
    if (lt) {
      lt->rms1 = std::move(rms1);
      lt->h1 = std::move(h1);
      lt->z = std::move(z);
      lt->x_mid = std::move(x_mid);
      lt->rms2 = std::move(rms2);
      lt->h2 = std::move(h2);
      lt->gate_pre = std::move(gate_pre);
      lt->up_out = std::move(up_out);
      lt->act = std::move(act);
    }
    x = std::move(x_post);
  }

  auto rms_f = row_rms(x, eps);
  auto h_f = scale_by_rms(x, std::span<const T>(rms_f), weights.final_norm);
  auto logits = matmul(h_f, weights.unembed);
  if (cache) {
    cache->final_resid = x;
    cache->final_rms = rms_f;
    cache->logits = logits;
  }
  if (trace) {
    trace->x_final = std::move(x);
    trace->rms_final = std::move(rms_f);
    trace->h_final = std::move(h_f);
  }
  return logits;
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const ModelWeights<T>& weights, const ModelConfig& config,
                         const std::vector<TokenId>& tokens, CacheMode mode) {
  ForwardResult<T> result;
  if (mode == CacheMode::kFull) {
    result.cache.emplace();
    result.logits = detail::run_forward<T>(weights, config, tokens, &*result.cache, nullptr);
  } else {
    result.logits = detail::run_forward<T>(weights, config, tokens, nullptr, nullptr);
  }
  return result;
}

template <typename T>
TokenId argmax_lowest(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

template <typename T>
TokenId next_token(const ModelWeights<T>& weights, const ModelConfig& config,
                   const std::vector<TokenId>& tokens) {
  auto logits = detail::run_forward<T>(weights, config, tokens, nullptr, nullptr);
  return argmax_lowest<T>(logits.row(tokens.size() - 1));
}

#define PARENLENS_INSTANTIATE(T)                                                                       \
  template void for_each_tensor(ModelWeights<T>&,                                                      \
                                const std::function<void(const std::string&, Tensor<T>&)>&);           \
  template void for_each_tensor(const ModelWeights<T>&,                                                \
                                const std::function<void(const std::string&, const Tensor<T>&)>&);     \
  template ModelWeights<T> zeros_like_config(const ModelConfig&);                                      \
  template void check_shapes(const ModelWeights<T>&, const ModelConfig&);                              \
  template ModelWeights<T> init_random(const ModelConfig&, std::uint64_t);                             \
  template Tensor<T> detail::run_forward(const ModelWeights<T>&, const ModelConfig&,                   \
                                         const std::vector<TokenId>&, ActivationCache<T>*,             \
                                         detail::ForwardTrace<T>*);                                    \
  template ForwardResult<T> forward(const ModelWeights<T>&, const ModelConfig&,                        \
                                    const std::vector<TokenId>&, CacheMode);                           \
  template TokenId argmax_lowest(std::span<const T>);                                                  \
  template TokenId next_token(const ModelWeights<T>&, const ModelConfig&, const std::vector<TokenId>&);

PARENLENS_INSTANTIATE(float)
PARENLENS_INSTANTIATE(double)

#undef PARENLENS_INSTANTIATE

}  // namespace parenlens
