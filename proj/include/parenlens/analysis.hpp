#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "parenlens/dataset.hpp"
#include "parenlens/model.hpp"

namespace parenlens {

/// How an intermediate vector is mapped to vocabulary logits.
///   kRaw:             v · W_U
///   kFrozenFinalNorm: (v / final_rms ⊙ final_norm) · W_U, where final_rms is
///                     the cached rms of the full final residual at the same
///                     position. Linear in v, so component lenses add up to
///                     the true logits.
enum class LensMode { kRaw, kFrozenFinalNorm };

std::string to_string(LensMode m);  // "raw" / "frozen"
LensMode parse_lens_mode(const std::string& s);

/// A place in the residual computation whose output can be read through the lens.
struct LensPoint {
  enum class Kind { kEmbed, kResidPre, kResidPost, kAttnOut, kMlpOut, kHeadOut, kFinal };
  Kind kind = Kind::kFinal;
  int layer = -1;
  int head = -1;

  static LensPoint embed() { return {Kind::kEmbed}; }
  static LensPoint resid_pre(int l) { return {Kind::kResidPre, l}; }
  static LensPoint resid_post(int l) { return {Kind::kResidPost, l}; }
  static LensPoint attn_out(int l) { return {Kind::kAttnOut, l}; }
  static LensPoint mlp_out(int l) { return {Kind::kMlpOut, l}; }
  static LensPoint head_out(int l, int h) { return {Kind::kHeadOut, l, h}; }
  static LensPoint final_resid() { return {Kind::kFinal}; }

  /// "embed", "L2_pre", "L2_post", "L2_attn", "L2_mlp", "L2H5", "final".
  std::string label() const;
  static LensPoint parse(const std::string& label);

  friend bool operator==(const LensPoint&, const LensPoint&) = default;
};

/// Row `position` of the cached activation at `point`. Throws NotFoundError
/// when the cache holds no such activation.
template <typename T>
std::vector<T> lens_vector(const ActivationCache<T>& cache, const LensPoint& point, std::size_t position);

/// Projects an arbitrary d_model vector read at `position`.
template <typename T>
Tensor<T> project_vector(std::span<const T> v, const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                         LensMode mode, std::size_t position);

/// Lens logits at the final position (the one predicting the closing run).
template <typename T>
Tensor<T> lens_logits(const ActivationCache<T>& cache, const ModelWeights<T>& weights, const LensPoint& point,
                      LensMode mode);

/// 1-based rank under descending order; equal logits rank the lower id first.
template <typename T>
int rank_of(std::span<const T> logits, TokenId target);

/// logits[target] - logits[counterfactual]. Throws InvalidArgument when the ids coincide.
template <typename T>
double logit_diff(std::span<const T> logits, TokenId target, TokenId counterfactual);

struct Milestones {
  int l_top10 = 0;
  int l_top1 = 0;
  int l_consistent_top1 = 0;

  friend bool operator==(const Milestones&, const Milestones&) = default;
};

/// Rank of `target` at resid_post(l) for every layer.
template <typename T>
std::vector<int> rank_trajectory(const ActivationCache<T>& cache, const ModelWeights<T>& weights, TokenId target,
                                 LensMode mode);

/// First layer with rank ≤ 10, first with rank 1, first from which the rank
/// stays 1. Unreached milestones map to the trajectory length.
Milestones rq1_milestones(const std::vector<int>& ranks);

/// Order statistic at index ceil(n/2) - 1 of the sorted values.
int lower_median(std::vector<int> values);

struct RQ1GroupStats {
  std::string group;
  int n = 0;
  Milestones median;
  double coverage_top10 = 0;  // share of prompts whose milestone is below the sentinel
  double coverage_top1 = 0;
  double coverage_consistent_top1 = 0;
};

RQ1GroupStats rq1_aggregate(const std::string& group, const std::vector<Milestones>& values, int n_layers);

struct AttributionReport {
  std::vector<std::pair<LensPoint, double>> entries;
  std::string group;
  LensMode mode = LensMode::kFrozenFinalNorm;
  int n = 1;  // prompts averaged into this report

  double sum() const;
  double at(const LensPoint& p) const;
};

/// Logit difference of the accumulated residual at resid_pre(0..L-1) then
/// resid_post(L-1). A model without layers yields the single point `embed`.
template <typename T>
AttributionReport accumulated_diff_curve(const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                                         TokenId target, TokenId counterfactual, LensMode mode);

/// Direct contribution of `embed` and of every attn_out(l), mlp_out(l).
template <typename T>
AttributionReport sublayer_attribution(const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                                       TokenId target, TokenId counterfactual, LensMode mode);

struct HeadMatrix {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> values;  // row-major, layer × head

  double at(int layer, int head) const { return values[static_cast<std::size_t>(layer * n_heads + head)]; }
  double row_sum(int layer) const;
};

template <typename T>
HeadMatrix head_attribution(const ActivationCache<T>& cache, const ModelWeights<T>& weights, TokenId target,
                            TokenId counterfactual, LensMode mode);

AttributionReport to_report(const HeadMatrix& m, LensMode mode);
HeadMatrix to_head_matrix(const AttributionReport& r, int n_layers, int n_heads);

/// Attention weights of one query row over all key positions (zeros past the
/// query). `query` defaults to the last position.
template <typename T>
std::vector<T> attention_pattern(const ActivationCache<T>& cache, int layer, int head,
                                 std::optional<int> query = std::nullopt);
template <typename T>
Tensor<T> attention_matrix(const ActivationCache<T>& cache, int layer, int head);

/// Arithmetic mean per point within each group, groups in order of first
/// appearance. Throws InvalidArgument on mixed lens modes or mismatched points.
std::vector<AttributionReport> aggregate(const std::vector<std::pair<std::string, AttributionReport>>& reports);

enum class Grouping { kSubTask, kPromptType };
Grouping parse_grouping(const std::string& s);  // "subtask" / "prompt-type"
std::string group_key(const PromptRecord& r, Grouping g);

/// Everything the RQ1-RQ3 commands and the inspect server compute for one prompt.
template <typename T>
struct PromptAnalysis {
  TokenId target = -1;
  TokenId counterfactual = -1;
  double final_diff = 0;  // from the model's own output logits
  std::vector<int> ranks;
  Milestones milestones;
  AttributionReport curve;
  AttributionReport sublayer;
  HeadMatrix heads;
  ActivationCache<T> cache;
};

template <typename T>
PromptAnalysis<T> analyze_prompt(const ModelWeights<T>& weights, const ModelConfig& config,
                                 const std::vector<TokenId>& tokens, TokenId target, TokenId counterfactual,
                                 LensMode mode);

}  // namespace parenlens
