#include "parenlens/trainer.hpp"

#include <cmath>
#include <ostream>
#include <random>

#include "forward_trace.hpp"
#include "parallel.hpp"
#include "parenlens/report.hpp"

namespace parenlens {

void TrainConfig::validate() const {
  if (steps <= 0) throw ConfigError("train config: steps must be positive");
  if (batch_size <= 0) throw ConfigError("train config: batch_size must be positive");
  if (learning_rate < 0 || !std::isfinite(learning_rate)) {
    throw ConfigError("train config: learning rate must be finite and non-negative");
  }
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train config: Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train config: Adam eps must be positive");
  if (warmup_steps < 0) throw ConfigError("train config: warmup must be non-negative");
  if (eval_every <= 0) throw ConfigError("train config: eval_every must be positive");
}

std::string tensor_class(const std::string& name) {
  if (!name.starts_with("layers.")) return name;
  auto dot = name.find('.', 7);
  return name.substr(dot + 1);
}

namespace {

template <typename T>
struct NormGrad {
  Tensor<T> dx;
  Tensor<T> dgain;
};

// y = x / rms ⊙ g, rms = sqrt(mean(x²) + eps)
template <typename T>
NormGrad<T> rms_norm_backward(const Tensor<T>& x, const std::vector<T>& rms, const Tensor<T>& gain,
                              const Tensor<T>& dy) {
  const std::size_t rows = x.dim(0);
  const std::size_t d = x.dim(1);
  NormGrad<T> out{Tensor<T>(x.shape()), Tensor<T>(gain.shape())};
  auto g = gain.data();
  auto dg = out.dgain.data();
  for (std::size_t i = 0; i < rows; ++i) {
    auto xi = x.row(i);
    auto dyi = dy.row(i);
    auto dxi = out.dx.row(i);
    const T r = rms[i];
    T dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dg[j] += dyi[j] * xi[j] / r;
      dot += dyi[j] * g[j] * xi[j];
    }
    const T coeff = dot / (static_cast<T>(d) * r * r * r);
    for (std::size_t j = 0; j < d; ++j) dxi[j] = dyi[j] * g[j] / r - xi[j] * coeff;
  }
  return out;
}

// Accumulates the gradient of `scale · Σ CE` for one sequence into `grads`
// and returns the unscaled CE sum.
template <typename T>
double example_backward(const ModelWeights<T>& w, const ModelConfig& config, const std::vector<TokenId>& tokens,
                        T scale, ModelWeights<T>& grads) {
  detail::ForwardTrace<T> tr;
  const auto logits = detail::run_forward<T>(w, config, tokens, nullptr, &tr);
  const std::size_t seq = tokens.size();
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  const auto dh = static_cast<std::size_t>(config.d_head);
  const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  double ce = 0;
  Tensor<T> dlogits(logits.shape());
  for (std::size_t i = 0; i + 1 < seq; ++i) {
    auto row = logits.row(i);
    auto drow = dlogits.row(i);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    double sum = 0;
    for (T v : row) sum += std::exp(static_cast<double>(v - mx));
    const double log_z = static_cast<double>(mx) + std::log(sum);
    const auto target = static_cast<std::size_t>(tokens[i + 1]);
    ce += log_z - static_cast<double>(row[target]);
    for (std::size_t j = 0; j < vocab; ++j) {
      drow[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z)) * scale;
    }
    drow[target] -= scale;
  }

  add_inplace(grads.unembed, matmul_tn(tr.h_final, dlogits));
  auto dh_final = matmul_nt(dlogits, w.unembed);
  auto fin = rms_norm_backward(tr.x_final, tr.rms_final, w.final_norm, dh_final);
  add_inplace(grads.final_norm, fin.dgain);
  Tensor<T> dx = std::move(fin.dx);

  for (std::size_t l = w.layers.size(); l-- > 0;) {
    const auto& L = w.layers[l];
    const auto& t = tr.layers[l];
    auto& G = grads.layers[l];

    // feed-forward
    add_inplace(G.down, matmul_tn(t.act, dx));
    auto dact = matmul_nt(dx, L.down);
    Tensor<T> dgate(dact.shape());
    Tensor<T> dup(dact.shape());
    for (std::size_t i = 0; i < dact.size(); ++i) {
      dgate[i] = dact[i] * t.up_out[i] * detail::silu_grad(t.gate_pre[i]);
      dup[i] = dact[i] * detail::silu(t.gate_pre[i]);
    }
    add_inplace(G.gate, matmul_tn(t.h2, dgate));
    add_inplace(G.up, matmul_tn(t.h2, dup));
    auto dh2 = matmul_nt(dgate, L.gate);
    add_inplace(dh2, matmul_nt(dup, L.up));
    auto n2 = rms_norm_backward(t.x_mid, t.rms2, L.norm2, dh2);
    add_inplace(G.norm2, n2.dgain);
    add_inplace(dx, n2.dx);  // dx is now d(x_mid)

    // attention
    add_inplace(G.wo, matmul_tn(t.z, dx));
    auto dz = matmul_nt(dx, L.wo);
    Tensor<T> dq(t.h1.shape()), dk(t.h1.shape()), dv(t.h1.shape());
    for (std::size_t h = 0; h < t.heads.size(); ++h) {
      const auto& H = t.heads[h];
      auto dzh = column_block(dz, h * dh, dh);
      auto dp = matmul_nt(dzh, H.v);
      set_column_block(dv, h * dh, matmul_tn(H.pattern, dzh));
      Tensor<T> ds(dp.shape());
      for (std::size_t i = 0; i < seq; ++i) {
        auto p = H.pattern.row(i);
        auto dpi = dp.row(i);
        T dot = 0;
        for (std::size_t j = 0; j <= i; ++j) dot += p[j] * dpi[j];
        auto dsi = ds.row(i);
        for (std::size_t j = 0; j <= i; ++j) dsi[j] = p[j] * (dpi[j] - dot) * attn_scale;
      }
      auto dqr = matmul(ds, H.k_rot);
      auto dkr = matmul_tn(ds, H.q_rot);
      set_column_block(dq, h * dh, rope_apply(dqr, tr.positions, config.rope_theta, true));
      set_column_block(dk, h * dh, rope_apply(dkr, tr.positions, config.rope_theta, true));
    }
    add_inplace(G.wq, matmul_tn(t.h1, dq));
    add_inplace(G.wk, matmul_tn(t.h1, dk));
    add_inplace(G.wv, matmul_tn(t.h1, dv));
    auto dh1 = matmul_nt(dq, L.wq);
    add_inplace(dh1, matmul_nt(dk, L.wk));
    add_inplace(dh1, matmul_nt(dv, L.wv));
    auto n1 = rms_norm_backward(t.x_in, t.rms1, L.norm1, dh1);
    add_inplace(G.norm1, n1.dgain);
    add_inplace(dx, n1.dx);  // d(resid_pre)
  }

  for (std::size_t i = 0; i < seq; ++i) {
    auto src = dx.row(i);
    auto dst = grads.embed.row(static_cast<std::size_t>(tokens[i]));
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
  return ce;
}

std::size_t predicted_positions(const Batch& batch) {
  if (batch.empty()) throw InvalidArgument("loss: empty batch");
  std::size_t n = 0;
  for (const auto& s : batch) n += s.empty() ? 0 : s.size() - 1;
  if (n == 0) throw InvalidArgument("loss: batch has no predicted positions (all sequences shorter than 2)");
  return n;
}

template <typename T>
void add_weights(ModelWeights<T>& acc, const ModelWeights<T>& g) {
  std::vector<Tensor<T>*> dst;
  for_each_tensor<T>(acc, [&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
  std::size_t i = 0;
  for_each_tensor<T>(g, [&](const std::string&, const Tensor<T>& t) { add_inplace(*dst[i++], t); });
}

template <typename T>
void zero_weights(ModelWeights<T>& w) {
  for_each_tensor<T>(w, [](const std::string&, Tensor<T>& t) {
    for (auto& x : t.data()) x = T{0};
  });
}

}  // namespace

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch) {
  const std::size_t n = predicted_positions(batch);
  const T scale = static_cast<T>(1.0 / static_cast<double>(n));
  LossAndGrads<T> out{0.0, zeros_like_config<T>(config)};

  const std::size_t wave = std::min<std::size_t>(detail::worker_count(), batch.size());
  std::vector<ModelWeights<T>> scratch(wave, zeros_like_config<T>(config));
  std::vector<double> ce(batch.size(), 0.0);
  for (std::size_t start = 0; start < batch.size(); start += wave) {
    const std::size_t count = std::min(wave, batch.size() - start);
    detail::parallel_for(count, [&](std::size_t k) {
      zero_weights(scratch[k]);
      ce[start + k] = example_backward(weights, config, batch[start + k], scale, scratch[k]);
    });
    for (std::size_t k = 0; k < count; ++k) add_weights(out.grads, scratch[k]);
  }
  double total = 0;
  for (double c : ce) total += c;
  out.loss = total / static_cast<double>(n);
  return out;
}

template <typename T>
double batch_loss(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch) {
  const std::size_t n = predicted_positions(batch);
  std::vector<double> ce(batch.size(), 0.0);
  detail::parallel_for(batch.size(), [&](std::size_t b) {
    const auto& tokens = batch[b];
    auto logits = detail::run_forward<T>(weights, config, tokens, nullptr, nullptr);
    double sum_ce = 0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      auto row = logits.row(i);
      T mx = row[0];
      for (T v : row) mx = std::max(mx, v);
      double sum = 0;
      for (T v : row) sum += std::exp(static_cast<double>(v - mx));
      sum_ce += static_cast<double>(mx) + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(tokens[i + 1])]);
    }
    ce[b] = sum_ce;
  });
  double total = 0;
  for (double c : ce) total += c;
  return total / static_cast<double>(n);
}

template <typename T>
FiniteDiffReport finite_diff_check(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch,
                                   const FiniteDiffOptions& options) {
  if constexpr (!std::is_same_v<T, double>) {
    throw InvalidArgument("finite_diff_check requires f64 weights; f32 central differences are dominated by rounding");
  } else {
    if (!(options.h > 0)) throw InvalidArgument("finite_diff_check: h must be positive");
    const auto analytic = loss_and_grads(weights, config, batch).grads;
    ModelWeights<double> probe = weights;

    std::vector<std::pair<std::string, Tensor<double>*>> params;
    for_each_tensor<double>(probe, [&](const std::string& name, Tensor<double>& t) { params.emplace_back(name, &t); });
    std::vector<const Tensor<double>*> grads;
    for_each_tensor<double>(analytic, [&](const std::string&, const Tensor<double>& t) { grads.push_back(&t); });

    std::map<std::string, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < params.size(); ++i) classes[tensor_class(params[i].first)].push_back(i);

    std::mt19937_64 rng(options.seed);
    FiniteDiffReport report;
    auto run_probe = [&](std::size_t which) {
      auto& t = *params[which].second;
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng);
      const double orig = t[idx];
      t[idx] = orig + options.h;
      const double up = batch_loss(probe, config, batch);
      t[idx] = orig - options.h;
      const double down = batch_loss(probe, config, batch);
      t[idx] = orig;
      GradProbe p;
      p.tensor = params[which].first;
      p.index = idx;
      p.analytic = (*grads[which])[idx];
      p.numeric = (up - down) / (2 * options.h);
      p.rel_error = std::abs(p.analytic - p.numeric) / std::max(std::abs(p.analytic) + std::abs(p.numeric), 1e-8);
      report.max_rel_error = std::max(report.max_rel_error, p.rel_error);
      auto& cls = report.max_rel_error_by_class[tensor_class(p.tensor)];
      cls = std::max(cls, p.rel_error);
      report.probes.push_back(std::move(p));
    };

    if (options.per_class) {
      for (const auto& [cls, members] : classes) {
        for (int k = 0; k < options.n_probes; ++k) {
          run_probe(members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)]);
        }
      }
    } else {
      std::vector<std::size_t> sizes;
      for (auto& [name, t] : params) sizes.push_back(t->size());
      std::discrete_distribution<std::size_t> pick(sizes.begin(), sizes.end());
      for (int k = 0; k < options.n_probes; ++k) run_probe(pick(rng));
    }
    return report;
  }
}

template <typename T>
TrainResult<T> train(ModelWeights<T> weights, const ModelConfig& model_config, const TrainConfig& config,
                     const Batch& corpus, const std::vector<PromptRecord>& heldout, const ReportCallback& on_report) {
  config.validate();
  model_config.validate();
  check_shapes(weights, model_config);
  if (corpus.empty()) throw InvalidArgument("train: corpus is empty");

  TrainResult<T> result;
  auto m = zeros_like_config<T>(model_config);
  auto v = zeros_like_config<T>(model_config);
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);

  double loss_acc = 0;
  int loss_count = 0;
  for (int step = 1; step <= config.steps; ++step) {
    Batch batch;
    batch.reserve(static_cast<std::size_t>(config.batch_size));
    for (int b = 0; b < config.batch_size; ++b) batch.push_back(corpus[pick(rng)]);
    auto lg = loss_and_grads(weights, model_config, batch);
    if (!std::isfinite(lg.loss)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": loss is " +
                          std::to_string(lg.loss));
    }
    loss_acc += lg.loss;
    ++loss_count;

    const double warm = config.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / config.warmup_steps) : 1.0;
    const double lr = config.learning_rate * warm;
    const double c1 = 1.0 - std::pow(config.beta1, step);
    const double c2 = 1.0 - std::pow(config.beta2, step);
    std::vector<Tensor<T>*> ms, vs, gs;
    for_each_tensor<T>(m, [&](const std::string&, Tensor<T>& t) { ms.push_back(&t); });
    for_each_tensor<T>(v, [&](const std::string&, Tensor<T>& t) { vs.push_back(&t); });
    for_each_tensor<T>(lg.grads, [&](const std::string&, Tensor<T>& t) { gs.push_back(&t); });
    std::size_t k = 0;
    for_each_tensor<T>(weights, [&](const std::string&, Tensor<T>& w) {
      auto wd = w.data();
      auto md = ms[k]->data();
      auto vd = vs[k]->data();
      auto gd = gs[k]->data();
      for (std::size_t i = 0; i < wd.size(); ++i) {
        const double g = gd[i];
        md[i] = static_cast<T>(config.beta1 * md[i] + (1 - config.beta1) * g);
        vd[i] = static_cast<T>(config.beta2 * vd[i] + (1 - config.beta2) * g * g);
        const double mhat = md[i] / c1;
        const double vhat = vd[i] / c2;
        wd[i] = static_cast<T>(wd[i] - lr * mhat / (std::sqrt(vhat) + config.adam_eps));
      }
      ++k;
    });

    if (step % config.eval_every == 0 || step == config.steps) {
      LossReport rep;
      rep.step = step;
      rep.loss = loss_acc / loss_count;
      if (!heldout.empty()) {
        auto acc = evaluate_accuracy(weights, model_config, heldout);
        rep.acc_two = acc.accuracy(SubTask::kTwo);
        rep.acc_three = acc.accuracy(SubTask::kThree);
        rep.acc_four = acc.accuracy(SubTask::kFour);
      }
      loss_acc = 0;
      loss_count = 0;
      result.reports.push_back(rep);
      if (on_report) on_report(rep);
    }
  }
  result.weights = std::move(weights);
  return result;
}

void write_loss_csv(std::ostream& os, const std::vector<LossReport>& reports) {
  CsvTable t({"step", "loss", "acc_two", "acc_three", "acc_four"});
  for (const auto& r : reports) {
    t.add_row({std::to_string(r.step), format_number(r.loss), format_number(r.acc_two), format_number(r.acc_three),
               format_number(r.acc_four)});
  }
  write_csv(os, t);
}

#define PARENLENS_INSTANTIATE(T)                                                                         \
  template LossAndGrads<T> loss_and_grads(const ModelWeights<T>&, const ModelConfig&, const Batch&);     \
  template double batch_loss(const ModelWeights<T>&, const ModelConfig&, const Batch&);                  \
  template FiniteDiffReport finite_diff_check(const ModelWeights<T>&, const ModelConfig&, const Batch&,  \
                                              const FiniteDiffOptions&);                                 \
  template TrainResult<T> train(ModelWeights<T>, const ModelConfig&, const TrainConfig&, const Batch&,   \
                                const std::vector<PromptRecord>&, const ReportCallback&);

PARENLENS_INSTANTIATE(float)
PARENLENS_INSTANTIATE(double)

#undef PARENLENS_INSTANTIATE

}  // namespace parenlens
