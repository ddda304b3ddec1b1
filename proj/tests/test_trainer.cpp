#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "parenlens/dataset.hpp"
#include "parenlens/trainer.hpp"

using namespace parenlens;

namespace {

ModelConfig tiny(int layers, int vocab = 9) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab_size = vocab;
  c.context_len = 12;
  return c;
}

Batch sample_batch() { return {{0, 3, 5, 1, 2}, {0, 8, 8, 7}, {4, 1}}; }

}  // namespace

TEST_CASE("loss of a zero-layer model equals hand-computed cross-entropy") {
  const auto c = tiny(0);
  auto w = init_random<double>(c, 2);
  w.final_norm = TensorD({8}, std::vector<double>(8, 1.3));
  const Batch batch = {{1, 4, 2}};
  double total = 0;
  for (std::size_t t = 0; t + 1 < batch[0].size(); ++t) {
    const auto e = w.embed.row(static_cast<std::size_t>(batch[0][t]));
    double ss = 0;
    for (double v : e) ss += v * v;
    const double r = std::sqrt(ss / 8 + c.norm_eps);
    std::vector<double> logits(9, 0.0);
    for (std::size_t j = 0; j < 9; ++j)
      for (std::size_t i = 0; i < 8; ++i) logits[j] += e[i] / r * 1.3 * w.unembed(i, j);
    double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
    for (double l : logits) z += std::exp(l - mx);
    total += -(logits[static_cast<std::size_t>(batch[0][t + 1])] - mx - std::log(z));
  }
  CHECK(batch_loss(w, c, batch) == doctest::Approx(total / 2).epsilon(1e-12));
  CHECK(loss_and_grads(w, c, batch).loss == doctest::Approx(total / 2).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences for every tensor class") {
  for (int layers : {1, 2}) {
    const auto c = tiny(layers);
    const auto w = init_random<double>(c, 21);
    FiniteDiffOptions opt;
    opt.n_probes = 20;
    opt.per_class = true;
    opt.seed = 3;
    auto rep = finite_diff_check(w, c, sample_batch(), opt);
    CAPTURE(layers);
    CHECK(rep.max_rel_error < 1e-4);
    CHECK(rep.max_rel_error_by_class.count("attn.wq"));
    CHECK(rep.max_rel_error_by_class.count("mlp.down"));
    CHECK(rep.max_rel_error_by_class.count("embed"));
    CHECK(rep.max_rel_error_by_class.count("unembed"));
  }
}

TEST_CASE("a parameter the batch never touches has zero gradient on both sides") {
  const auto c = tiny(1);
  auto w = init_random<double>(c, 4);
  const auto g = loss_and_grads(w, c, sample_batch()).grads;
  const std::size_t unused = 6;  // token id absent from the batch
  for (std::size_t i = 0; i < 8; ++i) {
    const double orig = w.embed(unused, i);
    w.embed(unused, i) = orig + 1e-5;
    const double up = batch_loss(w, c, sample_batch());
    w.embed(unused, i) = orig - 1e-5;
    const double down = batch_loss(w, c, sample_batch());
    w.embed(unused, i) = orig;
    CHECK(std::abs(g.embed(unused, i)) < 1e-12);
    CHECK(std::abs((up - down) / 2e-5) < 1e-12);
  }
}

TEST_CASE("finite differences are refused in single precision") {
  const auto c = tiny(1);
  CHECK_THROWS_AS(finite_diff_check(init_random<float>(c, 1), c, sample_batch()), InvalidArgument);
}

TEST_CASE("tensor class strips the layer index") {
  CHECK(tensor_class("layers.3.attn.wq") == "attn.wq");
  CHECK(tensor_class("embed") == "embed");
}

TEST_CASE("gradients do not depend on the worker count") {
  const auto c = tiny(2);
  const auto w = init_random<float>(c, 5);
  const auto a = loss_and_grads(w, c, sample_batch());
  const auto b = loss_and_grads(w, c, sample_batch());
  CHECK(a.loss == b.loss);
  CHECK(a.grads.layers[1].wv == b.grads.layers[1].wv);
}

TEST_CASE("training lowers the loss and is deterministic") {
  const auto c = tiny(1);
  const Batch corpus = {{0, 1, 2, 3, 4, 5}, {0, 5, 4, 3, 2, 1}, {0, 1, 1, 2, 2, 3}};
  TrainConfig tc;
  tc.steps = 120;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.warmup_steps = 10;
  tc.eval_every = 40;
  tc.seed = 4;
  auto r1 = train(init_random<float>(c, 1), c, tc, corpus, {});
  auto r2 = train(init_random<float>(c, 1), c, tc, corpus, {});
  REQUIRE(r1.reports.size() == 3);
  CHECK(r1.reports.back().loss < r1.reports.front().loss);
  CHECK(r1.reports == r2.reports);
  CHECK(r1.weights.embed == r2.weights.embed);
}

TEST_CASE("zero learning rate leaves the weights untouched") {
  const auto c = tiny(1);
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 2;
  tc.learning_rate = 0;
  tc.eval_every = 5;
  const auto w = init_random<float>(c, 8);
  auto r = train(w, c, tc, sample_batch(), {});
  CHECK(r.weights.embed == w.embed);
  CHECK(r.weights.layers[0].gate == w.layers[0].gate);
}

TEST_CASE("divergence is reported as a training error") {
  const auto c = tiny(1);
  TrainConfig tc;
  tc.steps = 3;
  tc.batch_size = 2;
  tc.eval_every = 3;
  auto w = init_random<float>(c, 8);
  w.unembed(0, 0) = std::nanf("");
  CHECK_THROWS_AS(train(w, c, tc, sample_batch(), {}), TrainingError);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.steps = 0;
  CHECK_THROWS(tc.validate());
  tc = {};
  tc.learning_rate = -1;
  CHECK_THROWS(tc.validate());
}

TEST_CASE("loss CSV has a header and one row per report") {
  std::ostringstream os;
  write_loss_csv(os, {{250, 1.5, 0.25, 0, 1}, {500, 0.123456789, 1, 1, 1}});
  CHECK(os.str() == "step,loss,acc_two,acc_three,acc_four\r\n250,1.5,0.25,0,1\r\n500,0.123457,1,1,1\r\n");
}
