#include <doctest.h>

#include <cstring>

#include <cmath>

#include "helpers.hpp"
#include "parenlens/model.hpp"
#include "parenlens/tokenizer.hpp"
#include "parenlens/weights_io.hpp"
#include "support/reference_model.hpp"

using namespace parenlens;

namespace {

ModelConfig small_config(int layers, int heads, int d_model, int vocab = 11) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_head = d_model / heads;
  c.d_ff = 2 * d_model;
  c.vocab_size = vocab;
  c.context_len = 16;
  return c;
}

// Larger-than-default init so the oracle comparison exercises real curvature.
ModelWeights<double> noisy_weights(const ModelConfig& c, std::uint64_t seed) {
  auto w = init_random<double>(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<double> nd(0, 0.5);
  for_each_tensor<double>(w, [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.data()) v += nd(rng);
  });
  return w;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = ModelConfig::tiny_default(59);
  CHECK_NOTHROW(c.validate());
  CHECK(c.n_layers == 4);
  CHECK(c.n_heads * c.d_head == c.d_model);
  c.d_head = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto z = small_config(0, 1, 8);
  CHECK_NOTHROW(z.validate());
}

TEST_CASE("forward matches the scalar reference") {
  for (auto [layers, heads, d] : {std::array<int, 3>{1, 1, 8}, {2, 2, 8}, {3, 4, 16}, {0, 1, 8}}) {
    const auto c = small_config(layers, heads, d);
    const auto w = noisy_weights(c, 7 + layers);
    std::vector<TokenId> toks = {0, 3, 5, 10, 2, 2, 7};
    const auto got = forward(w, c, toks).logits;
    const auto want = reference::logits(w, c, toks);
    double worst = 0;
    for (std::size_t i = 0; i < toks.size(); ++i)
      for (std::size_t j = 0; j < static_cast<std::size_t>(c.vocab_size); ++j)
        worst = std::max(worst, std::abs(got(i, j) - want[i][j]));
    CAPTURE(layers);
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("cache does not change the logits") {
  const auto c = small_config(2, 2, 8);
  const auto w = init_random<float>(c, 3);
  std::vector<TokenId> toks = {1, 2, 3, 4};
  auto a = forward(w, c, toks, CacheMode::kNone);
  auto b = forward(w, c, toks, CacheMode::kFull);
  CHECK(a.logits == b.logits);
  REQUIRE(b.cache);
  CHECK(b.cache->logits == b.logits);
  CHECK(b.cache->layers.size() == 2);
  CHECK(b.cache->layers[0].resid_pre == b.cache->embed);
  CHECK(b.cache->layers[1].head_out.size() == 2);
}

TEST_CASE("residual decomposition: embed + sub-layer outputs = final residual") {
  const auto c = small_config(3, 2, 16);
  const auto w = init_random<double>(c, 9);
  std::vector<TokenId> toks = {0, 4, 8, 1};
  auto cache = *forward(w, c, toks, CacheMode::kFull).cache;
  auto sum = cache.embed;
  for (const auto& L : cache.layers) {
    add_inplace(sum, L.attn_out);
    add_inplace(sum, L.mlp_out);
    TensorD heads(L.attn_out.shape());
    for (const auto& h : L.head_out) add_inplace(heads, h);
    CHECK(max_abs_diff(heads, L.attn_out) < 1e-12);
  }
  CHECK(max_abs_diff(sum, cache.final_resid) < 1e-12);
}

TEST_CASE("attention patterns are causal distributions") {
  const auto c = small_config(1, 2, 8);
  const auto w = init_random<float>(c, 4);
  auto cache = *forward(w, c, {1, 2, 3, 4, 5}, CacheMode::kFull).cache;
  const auto& P = cache.layers[0].attn_pattern;
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t q = 0; q < 5; ++q) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        if (k > q) CHECK(P(h, q, k) == 0.0f);
        s += P(h, q, k);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  CHECK(P(0, 0, 0) == 1.0f);
}

TEST_CASE("forward input errors") {
  const auto c = small_config(1, 1, 8);
  const auto w = init_random<float>(c, 1);
  CHECK_THROWS_AS(forward(w, c, {}), InvalidArgument);
  CHECK_THROWS_AS(forward(w, c, {0, 11}), InvalidArgument);
  CHECK_THROWS_AS(forward(w, c, std::vector<TokenId>(17, 0)), InvalidArgument);
  auto bad = w;
  bad.unembed = TensorF({8, 3});
  CHECK_THROWS_AS(check_shapes(bad, c), ShapeError);
}

TEST_CASE("init is deterministic per seed") {
  const auto c = small_config(2, 2, 8);
  auto a = init_random<float>(c, 5), b = init_random<float>(c, 5), d = init_random<float>(c, 6);
  CHECK(a.embed == b.embed);
  CHECK(a.layers[1].down == b.layers[1].down);
  CHECK_FALSE(a.embed == d.embed);
  CHECK(a.layers[0].norm1[0] == 1.0f);
}

TEST_CASE("greedy next token breaks ties to the lowest id") {
  std::vector<float> v = {0.5f, 2.0f, 2.0f, -1.0f};
  CHECK(argmax_lowest<float>(v) == 1);
}

TEST_CASE("MIW1 round trip and corruption") {
  const auto vocab = build_vocab();
  auto c = ModelConfig::tiny_default(static_cast<int>(vocab.size()));
  c.n_layers = 2;
  const auto w = init_random<float>(c, 11);
  auto bytes = encode_miw1(c, w, &vocab);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MIW1");
  auto f = decode_miw1(bytes);
  CHECK(f.config == c);
  REQUIRE(f.vocab);
  CHECK(*f.vocab == vocab);
  bool same = true;
  std::vector<const TensorF*> orig;
  for_each_tensor<float>(w, [&](const std::string&, const TensorF& t) { orig.push_back(&t); });
  std::size_t k = 0;
  for_each_tensor<float>(f.weights, [&](const std::string&, const TensorF& t) { same = same && t == *orig[k++]; });
  CHECK(same);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK_THROWS_AS(decode_miw1(truncated), IoError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_miw1(magic), IoError);
  CHECK_THROWS_AS(decode_miw1({}), IoError);

  testing::TempDir dir("miw");
  save_model(dir / "m.miw", c, w, &vocab);
  CHECK(load_model(dir / "m.miw").config == c);
  CHECK_THROWS_AS(load_model(dir / "missing.miw"), IoError);

  auto c2 = c;
  c2.vocab_size = 10;
  CHECK_THROWS_AS(encode_miw1(c2, init_random<float>(c2, 1), &vocab), MismatchError);
}

TEST_CASE("MIW1 header carries the config verbatim") {
  const auto c = small_config(1, 1, 8);
  auto bytes = encode_miw1(c, init_random<float>(c, 1));
  std::uint64_t h = 0;
  std::memcpy(&h, bytes.data() + 4, 8);
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(h));
  CHECK(header.find(config_to_json(c)) != std::string::npos);
  CHECK(config_from_json(config_to_json(c)) == c);
}
