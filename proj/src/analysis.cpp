#include "parenlens/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>

namespace parenlens {

std::string to_string(LensMode m) { return m == LensMode::kRaw ? "raw" : "frozen"; }

LensMode parse_lens_mode(const std::string& s) {
  if (s == "raw") return LensMode::kRaw;
  if (s == "frozen" || s == "frozen_final_norm") return LensMode::kFrozenFinalNorm;
  throw InvalidArgument("unknown lens mode '" + s + "' (expected frozen or raw)");
}

std::string LensPoint::label() const {
  const std::string l = "L" + std::to_string(layer);
  switch (kind) {
    case Kind::kEmbed: return "embed";
    case Kind::kResidPre: return l + "_pre";
    case Kind::kResidPost: return l + "_post";
    case Kind::kAttnOut: return l + "_attn";
    case Kind::kMlpOut: return l + "_mlp";
    case Kind::kHeadOut: return l + "H" + std::to_string(head);
    case Kind::kFinal: return "final";
  }
  return "?";
}

LensPoint LensPoint::parse(const std::string& label) {
  if (label == "embed") return embed();
  if (label == "final") return final_resid();
  static const std::regex sub(R"(L(\d+)_(pre|post|attn|mlp))");
  static const std::regex head_re(R"(L(\d+)H(\d+))");
  std::smatch m;
  if (std::regex_match(label, m, sub)) {
    const int l = std::stoi(m[1]);
    if (m[2] == "pre") return resid_pre(l);
    if (m[2] == "post") return resid_post(l);
    if (m[2] == "attn") return attn_out(l);
    return mlp_out(l);
  }
  if (std::regex_match(label, m, head_re)) return head_out(std::stoi(m[1]), std::stoi(m[2]));
  throw InvalidArgument("unknown lens point '" + label + "'");
}

template <typename T>
std::vector<T> lens_vector(const ActivationCache<T>& cache, const LensPoint& point, std::size_t position) {
  if (position >= cache.seq_len()) throw OutOfRangeError("lens position " + std::to_string(position) + " out of range");
  const Tensor<T>* src = nullptr;
  auto layer = [&]() -> const LayerCache<T>& {
    if (point.layer < 0 || static_cast<std::size_t>(point.layer) >= cache.layers.size()) {
      throw NotFoundError("cache has no layer " + std::to_string(point.layer) + " for point " + point.label());
    }
    return cache.layers[static_cast<std::size_t>(point.layer)];
  };
  switch (point.kind) {
    case LensPoint::Kind::kEmbed: src = &cache.embed; break;
    case LensPoint::Kind::kResidPre: src = &layer().resid_pre; break;
    case LensPoint::Kind::kResidPost: src = &layer().resid_post; break;
    case LensPoint::Kind::kAttnOut: src = &layer().attn_out; break;
    case LensPoint::Kind::kMlpOut: src = &layer().mlp_out; break;
    case LensPoint::Kind::kHeadOut: {
      const auto& L = layer();
      if (point.head < 0 || static_cast<std::size_t>(point.head) >= L.head_out.size()) {
        throw NotFoundError("cache has no head output for " + point.label());
      }
      src = &L.head_out[static_cast<std::size_t>(point.head)];
      break;
    }
    case LensPoint::Kind::kFinal: src = &cache.final_resid; break;
  }
  if (src->empty()) throw NotFoundError("activation " + point.label() + " was not cached");
  auto row = src->row(position);
  return {row.begin(), row.end()};
}

template <typename T>
Tensor<T> project_vector(std::span<const T> v, const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                         LensMode mode, std::size_t position) {
  const std::size_t d = weights.unembed.dim(0);
  if (v.size() != d) throw ShapeError("lens: vector of length " + std::to_string(v.size()) + " for d_model " + std::to_string(d));
  Tensor<T> row({1, d}, std::vector<T>(v.begin(), v.end()));
  if (mode == LensMode::kFrozenFinalNorm) {
    if (position >= cache.final_rms.size()) throw NotFoundError("cache lacks the final rms scale");
    const T rms = cache.final_rms[position];
    row = scale_by_rms(row, std::span<const T>(&rms, 1), weights.final_norm);
  }
  auto logits = matmul(row, weights.unembed);
  return Tensor<T>({logits.dim(1)}, std::vector<T>(logits.data().begin(), logits.data().end()));
}

template <typename T>
Tensor<T> lens_logits(const ActivationCache<T>& cache, const ModelWeights<T>& weights, const LensPoint& point,
                      LensMode mode) {
  const std::size_t pos = cache.seq_len() - 1;
  auto v = lens_vector(cache, point, pos);
  return project_vector<T>(v, cache, weights, mode, pos);
}

template <typename T>
int rank_of(std::span<const T> logits, TokenId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw InvalidArgument("rank_of: token id " + std::to_string(target) + " outside logits");
  }
  const T t = logits[static_cast<std::size_t>(target)];
  int rank = 1;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (logits[j] > t || (logits[j] == t && j < static_cast<std::size_t>(target))) ++rank;
  }
  return rank;
}

template <typename T>
double logit_diff(std::span<const T> logits, TokenId target, TokenId counterfactual) {
  if (target == counterfactual) throw InvalidArgument("logit_diff: target and counterfactual are the same token");
  const auto n = static_cast<TokenId>(logits.size());
  if (target < 0 || target >= n || counterfactual < 0 || counterfactual >= n) {
    throw InvalidArgument("logit_diff: token id outside logits");
  }
  return static_cast<double>(logits[static_cast<std::size_t>(target)]) -
         static_cast<double>(logits[static_cast<std::size_t>(counterfactual)]);
}

template <typename T>
std::vector<int> rank_trajectory(const ActivationCache<T>& cache, const ModelWeights<T>& weights, TokenId target,
                                 LensMode mode) {
  std::vector<int> ranks;
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    auto logits = lens_logits(cache, weights, LensPoint::resid_post(static_cast<int>(l)), mode);
    ranks.push_back(rank_of<T>(logits.data(), target));
  }
  return ranks;
}

Milestones rq1_milestones(const std::vector<int>& ranks) {
  if (ranks.empty()) throw InvalidArgument("rq1_milestones: empty rank trajectory");
  const int n = static_cast<int>(ranks.size());
  Milestones m{n, n, n};
  for (int l = 0; l < n; ++l) {
    if (ranks[l] <= 10 && m.l_top10 == n) m.l_top10 = l;
    if (ranks[l] == 1 && m.l_top1 == n) m.l_top1 = l;
  }
  for (int l = n; l-- > 0;) {
    if (ranks[l] != 1) break;
    m.l_consistent_top1 = l;
  }
  return m;
}

int lower_median(std::vector<int> values) {
  if (values.empty()) throw InvalidArgument("median of an empty group");
  std::sort(values.begin(), values.end());
  return values[(values.size() + 1) / 2 - 1];
}

RQ1GroupStats rq1_aggregate(const std::string& group, const std::vector<Milestones>& values, int n_layers) {
  if (values.empty()) throw InvalidArgument("rq1_aggregate: group '" + group + "' is empty");
  RQ1GroupStats s;
  s.group = group;
  s.n = static_cast<int>(values.size());
  std::vector<int> a, b, c;
  int ca = 0, cb = 0, cc = 0;
  for (const auto& m : values) {
    a.push_back(m.l_top10);
    b.push_back(m.l_top1);
    c.push_back(m.l_consistent_top1);
    ca += m.l_top10 < n_layers;
    cb += m.l_top1 < n_layers;
    cc += m.l_consistent_top1 < n_layers;
  }
  s.median = {lower_median(a), lower_median(b), lower_median(c)};
  s.coverage_top10 = static_cast<double>(ca) / s.n;
  s.coverage_top1 = static_cast<double>(cb) / s.n;
  s.coverage_consistent_top1 = static_cast<double>(cc) / s.n;
  return s;
}

double AttributionReport::sum() const {
  double s = 0;
  for (const auto& e : entries) s += e.second;
  return s;
}

double AttributionReport::at(const LensPoint& p) const {
  for (const auto& e : entries) {
    if (e.first == p) return e.second;
  }
  throw NotFoundError("report has no entry for " + p.label());
}

namespace {

template <typename T>
double diff_at(const ActivationCache<T>& cache, const ModelWeights<T>& weights, const LensPoint& p, TokenId target,
               TokenId cf, LensMode mode) {
  auto logits = lens_logits(cache, weights, p, mode);
  return logit_diff<T>(logits.data(), target, cf);
}

}  // namespace

template <typename T>
AttributionReport accumulated_diff_curve(const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                                         TokenId target, TokenId counterfactual, LensMode mode) {
  AttributionReport r;
  r.mode = mode;
  const int L = static_cast<int>(cache.layers.size());
  if (L == 0) {
    r.entries.emplace_back(LensPoint::embed(), diff_at(cache, weights, LensPoint::embed(), target, counterfactual, mode));
    return r;
  }
  for (int l = 0; l < L; ++l) {
    auto p = LensPoint::resid_pre(l);
    r.entries.emplace_back(p, diff_at(cache, weights, p, target, counterfactual, mode));
  }
  auto p = LensPoint::resid_post(L - 1);
  r.entries.emplace_back(p, diff_at(cache, weights, p, target, counterfactual, mode));
  return r;
}

template <typename T>
AttributionReport sublayer_attribution(const ActivationCache<T>& cache, const ModelWeights<T>& weights,
                                       TokenId target, TokenId counterfactual, LensMode mode) {
  AttributionReport r;
  r.mode = mode;
  r.entries.emplace_back(LensPoint::embed(), diff_at(cache, weights, LensPoint::embed(), target, counterfactual, mode));
  for (int l = 0; l < static_cast<int>(cache.layers.size()); ++l) {
    for (auto p : {LensPoint::attn_out(l), LensPoint::mlp_out(l)}) {
      r.entries.emplace_back(p, diff_at(cache, weights, p, target, counterfactual, mode));
    }
  }
  return r;
}

double HeadMatrix::row_sum(int layer) const {
  double s = 0;
  for (int h = 0; h < n_heads; ++h) s += at(layer, h);
  return s;
}

template <typename T>
HeadMatrix head_attribution(const ActivationCache<T>& cache, const ModelWeights<T>& weights, TokenId target,
                            TokenId counterfactual, LensMode mode) {
  HeadMatrix m;
  m.n_layers = static_cast<int>(cache.layers.size());
  m.n_heads = m.n_layers ? static_cast<int>(cache.layers[0].head_out.size()) : 0;
  if (m.n_layers && m.n_heads == 0) throw NotFoundError("cache holds no per-head outputs");
  for (int l = 0; l < m.n_layers; ++l) {
    for (int h = 0; h < m.n_heads; ++h) {
      m.values.push_back(diff_at(cache, weights, LensPoint::head_out(l, h), target, counterfactual, mode));
    }
  }
  return m;
}

AttributionReport to_report(const HeadMatrix& m, LensMode mode) {
  AttributionReport r;
  r.mode = mode;
  for (int l = 0; l < m.n_layers; ++l) {
    for (int h = 0; h < m.n_heads; ++h) r.entries.emplace_back(LensPoint::head_out(l, h), m.at(l, h));
  }
  return r;
}

HeadMatrix to_head_matrix(const AttributionReport& r, int n_layers, int n_heads) {
  HeadMatrix m{n_layers, n_heads, std::vector<double>(static_cast<std::size_t>(n_layers * n_heads), 0.0)};
  for (const auto& [p, v] : r.entries) {
    if (p.kind != LensPoint::Kind::kHeadOut || p.layer >= n_layers || p.head >= n_heads) {
      throw InvalidArgument("report entry " + p.label() + " is not a head of a " + std::to_string(n_layers) + "x" +
                            std::to_string(n_heads) + " grid");
    }
    m.values[static_cast<std::size_t>(p.layer * n_heads + p.head)] = v;
  }
  return m;
}

template <typename T>
Tensor<T> attention_matrix(const ActivationCache<T>& cache, int layer, int head) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= cache.layers.size()) {
    throw OutOfRangeError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(cache.layers.size()) + ")");
  }
  const auto& P = cache.layers[static_cast<std::size_t>(layer)].attn_pattern;
  if (head < 0 || static_cast<std::size_t>(head) >= P.dim(0)) {
    throw OutOfRangeError("head " + std::to_string(head) + " out of range [0, " + std::to_string(P.dim(0)) + ")");
  }
  const std::size_t seq = P.dim(1);
  auto first = P.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(head) * seq * seq);
  return Tensor<T>({seq, seq}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(seq * seq)));
}

template <typename T>
std::vector<T> attention_pattern(const ActivationCache<T>& cache, int layer, int head, std::optional<int> query) {
  auto M = attention_matrix(cache, layer, head);
  const int q = query.value_or(static_cast<int>(M.dim(0)) - 1);
  if (q < 0 || static_cast<std::size_t>(q) >= M.dim(0)) {
    throw OutOfRangeError("query position " + std::to_string(q) + " out of range");
  }
  auto row = M.row(static_cast<std::size_t>(q));
  return {row.begin(), row.end()};
}

std::vector<AttributionReport> aggregate(const std::vector<std::pair<std::string, AttributionReport>>& reports) {
  std::vector<AttributionReport> out;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<double>> sums;
  for (const auto& [group, r] : reports) {
    auto it = index.find(group);
    if (it == index.end()) {
      index.emplace(group, out.size());
      AttributionReport g = r;
      g.group = group;
      g.n = 0;
      out.push_back(std::move(g));
      sums.emplace_back(r.entries.size(), 0.0);
      it = index.find(group);
    }
    auto& g = out[it->second];
    if (g.mode != r.mode) throw InvalidArgument("aggregate: group '" + group + "' mixes lens modes");
    if (g.entries.size() != r.entries.size()) throw InvalidArgument("aggregate: group '" + group + "' mixes point sets");
    auto& s = sums[it->second];
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
      if (!(g.entries[i].first == r.entries[i].first)) {
        throw InvalidArgument("aggregate: group '" + group + "' mixes point sets");
      }
      s[i] += r.entries[i].second;
    }
    g.n += 1;
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (std::size_t i = 0; i < out[k].entries.size(); ++i) out[k].entries[i].second = sums[k][i] / out[k].n;
  }
  return out;
}

Grouping parse_grouping(const std::string& s) {
  if (s == "subtask" || s == "sub-task" || s == "sub_task") return Grouping::kSubTask;
  if (s == "prompt-type" || s == "prompt_type") return Grouping::kPromptType;
  throw InvalidArgument("unknown grouping '" + s + "' (expected subtask or prompt-type)");
}

std::string group_key(const PromptRecord& r, Grouping g) {
  return g == Grouping::kSubTask ? to_string(r.sub_task) : r.prompt_type();
}

template <typename T>
PromptAnalysis<T> analyze_prompt(const ModelWeights<T>& weights, const ModelConfig& config,
                                 const std::vector<TokenId>& tokens, TokenId target, TokenId counterfactual,
                                 LensMode mode) {
  auto fr = forward(weights, config, tokens, CacheMode::kFull);
  PromptAnalysis<T> a;
  a.target = target;
  a.counterfactual = counterfactual;
  a.cache = std::move(*fr.cache);
  a.final_diff = logit_diff<T>(a.cache.logits.row(tokens.size() - 1), target, counterfactual);
  a.ranks = rank_trajectory(a.cache, weights, target, mode);
  a.milestones = a.ranks.empty() ? Milestones{} : rq1_milestones(a.ranks);
  a.curve = accumulated_diff_curve(a.cache, weights, target, counterfactual, mode);
  a.sublayer = sublayer_attribution(a.cache, weights, target, counterfactual, mode);
  a.heads = head_attribution(a.cache, weights, target, counterfactual, mode);
  return a;
}

#define PARENLENS_INSTANTIATE(T)                                                                                \
  template std::vector<T> lens_vector(const ActivationCache<T>&, const LensPoint&, std::size_t);                \
  template Tensor<T> project_vector(std::span<const T>, const ActivationCache<T>&, const ModelWeights<T>&,      \
                                    LensMode, std::size_t);                                                     \
  template Tensor<T> lens_logits(const ActivationCache<T>&, const ModelWeights<T>&, const LensPoint&, LensMode); \
  template int rank_of(std::span<const T>, TokenId);                                                            \
  template double logit_diff(std::span<const T>, TokenId, TokenId);                                             \
  template std::vector<int> rank_trajectory(const ActivationCache<T>&, const ModelWeights<T>&, TokenId, LensMode); \
  template AttributionReport accumulated_diff_curve(const ActivationCache<T>&, const ModelWeights<T>&, TokenId,  \
                                                    TokenId, LensMode);                                         \
  template AttributionReport sublayer_attribution(const ActivationCache<T>&, const ModelWeights<T>&, TokenId,    \
                                                  TokenId, LensMode);                                           \
  template HeadMatrix head_attribution(const ActivationCache<T>&, const ModelWeights<T>&, TokenId, TokenId,      \
                                       LensMode);                                                               \
  template std::vector<T> attention_pattern(const ActivationCache<T>&, int, int, std::optional<int>);           \
  template Tensor<T> attention_matrix(const ActivationCache<T>&, int, int);                                     \
  template PromptAnalysis<T> analyze_prompt(const ModelWeights<T>&, const ModelConfig&,                         \
                                            const std::vector<TokenId>&, TokenId, TokenId, LensMode);

PARENLENS_INSTANTIATE(float)
PARENLENS_INSTANTIATE(double)

#undef PARENLENS_INSTANTIATE

}  // namespace parenlens
