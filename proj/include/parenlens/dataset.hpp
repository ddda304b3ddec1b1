#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "parenlens/model.hpp"
#include "parenlens/tokenizer.hpp"

namespace parenlens {

/// Prompts are labelled by how many `)` the single target token carries.
enum class SubTask { kTwo = 2, kThree = 3, kFour = 4 };

inline constexpr std::array<SubTask, 3> kAllSubTasks = {SubTask::kTwo, SubTask::kThree, SubTask::kFour};

std::string to_string(SubTask s);
/// Accepts "Two", "Three", "Four". Throws InvalidArgument otherwise.
SubTask parse_sub_task(const std::string& s);

/// Throws InvalidArgument unless `target` is a closing run of length 2-4.
SubTask classify_subtask(const std::string& target);
/// The closing run one `)` shorter.
std::string derive_counterfactual(const std::string& target);

struct DatasetConfig {
  std::vector<std::string> constructors = {"str", "list", "set"};
  // Range of open-parenthesis counts per line, `print(` included.
  int depth_min = 2;
  int depth_max = 12;
  std::vector<std::string> literals = {"2", "12", "123"};
  // Also emit the `C(...tuple([n])...)` variant of every line.
  bool tuple_wrapper = true;
  std::uint64_t seed = 0;

  /// Depth 3-5 with the tuple variant and 14 literals: 168 prompts split
  /// 42/84/42, the closest this tokenizer gets to 56/84/28.
  static DatasetConfig paper_mimic();
  /// Wide grid used as the training corpus (depth 2-12, literals 0-99 and 123).
  static DatasetConfig training_grid();

  /// Throws ConfigError.
  void validate() const;

  std::string to_json() const;
  /// Throws ConfigError on malformed JSON or unknown values.
  static DatasetConfig from_json(const std::string& text);
};

struct PromptRecord {
  int id = 0;
  std::string comment;
  std::string code_prefix;
  std::vector<TokenId> tokens;  // BOS + tokenize(comment + "\n" + code_prefix)
  std::string target;
  TokenId target_id = -1;
  std::string counterfactual;
  TokenId counterfactual_id = -1;
  SubTask sub_task = SubTask::kTwo;
  std::string constructor;
  int n_open = 0;
  int n_already_closed = 0;
  std::string literal;
  bool tuple_wrapper = false;

  std::string prompt_text() const { return comment + "\n" + code_prefix; }
  std::string full_line() const { return code_prefix + target; }
  /// "constructor:n_open", e.g. "str:3".
  std::string prompt_type() const { return constructor + ":" + std::to_string(n_open); }
};

/// Enumerates (constructor, depth, literal, wrapper) in that order, builds the
/// closed line, strips its final token and keeps the record when that token is
/// a run of two to four closing parentheses.
std::vector<PromptRecord> generate(const DatasetConfig& config, const Vocab& vocab);

std::string comment_for(const std::string& constructor, const std::string& literal);
/// Fully closed line, e.g. `print(str(str(12)))`.
std::string build_line(const std::string& constructor, int n_open, const std::string& literal,
                       bool tuple_wrapper);

/// Token sequence used for training: BOS + prompt + target.
std::vector<TokenId> training_sequence(const PromptRecord& r, const Vocab& vocab);

std::string to_jsonl_line(const PromptRecord& r);
PromptRecord from_jsonl_line(const std::string& line);
void write_jsonl(std::ostream& os, const std::vector<PromptRecord>& records);
std::vector<PromptRecord> read_jsonl(std::istream& is);
std::vector<PromptRecord> load_dataset(const std::string& path);
void save_dataset(const std::string& path, const std::vector<PromptRecord>& records);

/// Throws MismatchError when a record's tokens or target ids disagree with
/// what `vocab` produces for its text.
void check_vocab_consistency(const std::vector<PromptRecord>& records, const Vocab& vocab);

struct SubTaskCounts {
  std::array<int, 3> counts{};  // Two, Three, Four
  int total() const { return counts[0] + counts[1] + counts[2]; }
  int& operator[](SubTask s) { return counts[static_cast<int>(s) - 2]; }
  int operator[](SubTask s) const { return counts[static_cast<int>(s) - 2]; }
};
SubTaskCounts count_sub_tasks(const std::vector<PromptRecord>& records);

struct Prediction {
  int prompt_id = 0;
  SubTask sub_task = SubTask::kTwo;
  TokenId predicted = -1;
  TokenId target = -1;
  bool correct() const { return predicted == target; }
};

struct AccuracyReport {
  SubTaskCounts correct;
  SubTaskCounts total;
  std::vector<Prediction> predictions;

  /// Zero for an empty sub-task.
  double accuracy(SubTask s) const;
  double overall() const;
};

/// Greedy next-token accuracy per sub-task. Throws MismatchError when a
/// record's ids do not fit the model's vocabulary.
template <typename T>
AccuracyReport evaluate_accuracy(const ModelWeights<T>& weights, const ModelConfig& config,
                                 const std::vector<PromptRecord>& dataset);

}  // namespace parenlens
