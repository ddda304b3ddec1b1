#pragma once

#include <optional>
#include <string>
#include <vector>

#include "parenlens/analysis.hpp"
#include "parenlens/dataset.hpp"
#include "parenlens/report.hpp"
#include "parenlens/trainer.hpp"

namespace parenlens {

// Each run_* function is one CLI subcommand: it reads its inputs, writes its
// outputs plus a manifest, and returns the text the CLI prints. Errors are
// thrown as parenlens::Error so the caller can map them to exit codes.

struct CommandResult {
  std::string summary;
  std::vector<std::string> outputs;  // files written, in write order
};

struct GenDataOptions {
  std::string config_path;
  std::string out_path;
  std::optional<std::uint64_t> seed;
};
CommandResult run_gen_data(const GenDataOptions& o);

struct TrainOptions {
  std::string data_path;
  std::string model_out;
  std::string loss_csv;      // default: model_out + ".loss.csv"
  std::string heldout_path;  // optional; its lines are removed from the corpus
  TrainConfig train;
  ModelConfig model;  // vocab_size is overwritten with the tokenizer's
  bool quiet = false;
};
CommandResult run_train(const TrainOptions& o);

struct EvalOptions {
  std::string model_path;
  std::string data_path;
  std::string out_csv;  // optional per-prompt predictions
};
CommandResult run_eval(const EvalOptions& o);

struct AnalysisOptions {
  std::string model_path;
  std::string data_path;
  std::string out_dir;
  LensMode mode = LensMode::kFrozenFinalNorm;
  Grouping grouping = Grouping::kSubTask;
};
CommandResult run_rq1(const AnalysisOptions& o);
CommandResult run_rq2(const AnalysisOptions& o);
CommandResult run_rq3(const AnalysisOptions& o);

struct AttnOptions {
  std::string model_path;
  std::string data_path;
  int prompt_id = 0;
  int layer = 0;
  int head = 0;
  std::optional<int> query;  // default: last position
  std::string out_svg;       // CSVs go beside it: <stem>.csv and <stem>_matrix.csv
};
CommandResult run_attn(const AttnOptions& o);

/// Loads a model file and checks it against the tokenizer vocabulary and the
/// dataset. Throws MismatchError.
struct LoadedInputs {
  ModelConfig config;
  ModelWeights<float> weights;
  Vocab vocab;
  std::vector<PromptRecord> records;
};
LoadedInputs load_inputs(const std::string& model_path, const std::string& data_path);

/// Every output table of the analyses, computed in memory. The run_rq*
/// commands write these; the tests and the server compare against them.
struct AnalysisTables {
  CsvTable rq1;           // prompt_id, sub_task, group, l_top10, l_top1, l_consistent_top1
  CsvTable rq1_medians;   // group, n, l_top10, l_top1, l_consistent_top1, coverage_*
  CsvTable rq1_lens;      // prompt_id, layer, token_id, logit   (raw dump, %.9g)
  CsvTable rq2_prompts;   // prompt_id, group, final_diff, curve_last, sublayer_sum
  std::string rq2_jsonl;  // one object per prompt: curve and sub-layer points
  CsvTable rq2_curve;     // group, n, point, diff
  CsvTable rq2_sublayer;  // group, n, point, diff
  CsvTable rq3_heads;     // group, n, layer, head, diff
  CsvTable rq3_heads_per_prompt;  // prompt_id, group, layer, head, diff
  CsvTable groups;        // group, n
};
AnalysisTables compute_tables(const LoadedInputs& in, LensMode mode, Grouping grouping);

/// File-system safe form of a group key ("str:3" -> "str_3").
std::string safe_name(const std::string& group);

}  // namespace parenlens
