#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "parenlens/dataset.hpp"
#include "parenlens/model.hpp"

namespace parenlens {

struct TrainConfig {
  int steps = 3000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  std::uint64_t seed = 0;
  Precision precision = Precision::kF32;
  // A LossReport is emitted every `eval_every` steps and after the last one.
  int eval_every = 250;

  void validate() const;
};

struct LossReport {
  int step = 0;
  double loss = 0;  // mean training cross-entropy since the previous report
  double acc_two = 0;
  double acc_three = 0;
  double acc_four = 0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

using Batch = std::vector<std::vector<TokenId>>;

template <typename T>
struct LossAndGrads {
  double loss = 0;
  ModelWeights<T> grads;
};

/// Mean next-token cross-entropy over every non-final position of every
/// sequence, with gradients for all weights. Per-example gradients are summed
/// in batch order, so the result does not depend on the worker count.
template <typename T>
LossAndGrads<T> loss_and_grads(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch);

/// Same loss without the backward pass.
template <typename T>
double batch_loss(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch);

struct GradProbe {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct FiniteDiffReport {
  double max_rel_error = 0;
  std::vector<GradProbe> probes;
  std::map<std::string, double> max_rel_error_by_class;  // "embed", "attn.wq", "mlp.down", ...
};

struct FiniteDiffOptions {
  int n_probes = 50;
  double h = 1e-5;
  std::uint64_t seed = 0;
  // n_probes for every tensor class instead of n_probes overall.
  bool per_class = false;
};

/// Compares analytic gradients against (L(w+h) - L(w-h)) / 2h at randomly
/// chosen scalar parameters. Relative error is |a - n| / max(|a| + |n|, 1e-8).
/// Only meaningful in double precision: float weights are refused with
/// InvalidArgument.
template <typename T>
FiniteDiffReport finite_diff_check(const ModelWeights<T>& weights, const ModelConfig& config, const Batch& batch,
                                   const FiniteDiffOptions& options = {});

/// Strips the layer index: "layers.3.attn.wq" -> "attn.wq".
std::string tensor_class(const std::string& name);

template <typename T>
struct TrainResult {
  ModelWeights<T> weights;
  std::vector<LossReport> reports;
};

using ReportCallback = std::function<void(const LossReport&)>;

/// Adam with linear warmup, batches drawn uniformly from `corpus` by a
/// generator seeded from config.seed. Held-out accuracy is measured on
/// `heldout` at every report. Throws TrainingError if the loss stops being
/// finite.
template <typename T>
TrainResult<T> train(ModelWeights<T> weights, const ModelConfig& model_config, const TrainConfig& config,
                     const Batch& corpus, const std::vector<PromptRecord>& heldout,
                     const ReportCallback& on_report = {});

void write_loss_csv(std::ostream& os, const std::vector<LossReport>& reports);

}  // namespace parenlens
