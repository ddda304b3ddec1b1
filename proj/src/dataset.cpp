#include "parenlens/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "parallel.hpp"

namespace parenlens {

using json = nlohmann::ordered_json;

std::string to_string(SubTask s) {
  switch (s) {
    case SubTask::kTwo: return "Two";
    case SubTask::kThree: return "Three";
    case SubTask::kFour: return "Four";
  }
  return "?";
}

SubTask parse_sub_task(const std::string& s) {
  if (s == "Two") return SubTask::kTwo;
  if (s == "Three") return SubTask::kThree;
  if (s == "Four") return SubTask::kFour;
  throw InvalidArgument("unknown sub-task '" + s + "' (expected Two, Three or Four)");
}

SubTask classify_subtask(const std::string& target) {
  if (!is_closing_run(target) || target.size() < 2 || target.size() > 4) {
    throw InvalidArgument("target '" + target + "' is not a closing run of length 2-4");
  }
  return static_cast<SubTask>(target.size());
}

std::string derive_counterfactual(const std::string& target) {
  classify_subtask(target);
  return target.substr(1);
}

DatasetConfig DatasetConfig::paper_mimic() {
  DatasetConfig c;
  c.depth_min = 3;
  c.depth_max = 5;
  c.tuple_wrapper = true;
  c.literals = {"1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "12", "42", "99", "123"};
  return c;
}

DatasetConfig DatasetConfig::training_grid() {
  DatasetConfig c;
  c.depth_min = 2;
  c.depth_max = 12;
  c.tuple_wrapper = true;
  c.literals.clear();
  for (int i = 0; i < 100; ++i) c.literals.push_back(std::to_string(i));
  c.literals.push_back("123");
  return c;
}

void DatasetConfig::validate() const {
  if (constructors.empty()) throw ConfigError("dataset config: constructor list is empty");
  for (const auto& c : constructors) {
    if (c != "str" && c != "list" && c != "set") {
      throw ConfigError("dataset config: unknown constructor '" + c + "' (expected str, list or set)");
    }
  }
  if (depth_min < 2 || depth_max > 12 || depth_min > depth_max) {
    throw ConfigError("dataset config: depth range [" + std::to_string(depth_min) + ", " +
                      std::to_string(depth_max) + "] must lie within [2, 12]");
  }
  if (literals.empty()) throw ConfigError("dataset config: literal list is empty");
  for (const auto& lit : literals) {
    if (lit.empty() || lit.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("dataset config: literal '" + lit + "' is not a digit string");
    }
  }
}

std::string DatasetConfig::to_json() const {
  json j;
  j["constructors"] = constructors;
  j["depth_min"] = depth_min;
  j["depth_max"] = depth_max;
  j["literals"] = literals;
  j["tuple_wrapper"] = tuple_wrapper;
  j["seed"] = seed;
  return j.dump();
}

DatasetConfig DatasetConfig::from_json(const std::string& text) {
  DatasetConfig c;
  try {
    auto j = json::parse(text);
    if (!j.is_object()) throw ConfigError("dataset config: expected a JSON object");
    if (j.contains("preset")) {
      auto preset = j["preset"].get<std::string>();
      if (preset == "paper-mimic") c = paper_mimic();
      else if (preset == "training-grid") c = training_grid();
      else if (preset != "default") throw ConfigError("dataset config: unknown preset '" + preset + "'");
    }
    for (auto& [key, value] : j.items()) {
      if (key == "preset") continue;
      else if (key == "constructors") c.constructors = value.get<std::vector<std::string>>();
      else if (key == "depth_min") c.depth_min = value.get<int>();
      else if (key == "depth_max") c.depth_max = value.get<int>();
      else if (key == "literals") c.literals = value.get<std::vector<std::string>>();
      else if (key == "tuple_wrapper") c.tuple_wrapper = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("dataset config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string comment_for(const std::string& constructor, const std::string& literal) {
  if (constructor == "str") return "#print a string " + literal;
  return "#print a " + constructor + " containing " + literal;
}

std::string build_line(const std::string& constructor, int n_open, const std::string& literal,
                       bool tuple_wrapper) {
  const int n_ctor = n_open - 1 - (tuple_wrapper ? 1 : 0);
  if (n_ctor < 1) throw InvalidArgument("build_line: depth too small for one constructor call");
  std::string line = "print(";
  for (int i = 0; i < n_ctor; ++i) line += constructor + "(";
  line += tuple_wrapper ? "tuple([" + literal + "])" : literal;
  line.append(static_cast<std::size_t>(n_ctor + 1), ')');
  return line;
}

std::vector<PromptRecord> generate(const DatasetConfig& config, const Vocab& vocab) {
  config.validate();
  const TokenId bos = vocab.bos();
  std::vector<PromptRecord> out;
  for (const auto& ctor : config.constructors) {
    for (int depth = config.depth_min; depth <= config.depth_max; ++depth) {
      for (const auto& lit : config.literals) {
        for (bool wrap : {false, true}) {
          if (wrap && !config.tuple_wrapper) continue;
          if (depth - 1 - (wrap ? 1 : 0) < 1) continue;
          const auto comment = comment_for(ctor, lit);
          const auto line = build_line(ctor, depth, lit, wrap);
          auto ids = tokenize(vocab, comment + "\n" + line);
          const auto& last = vocab.token(ids.back());
          if (!is_closing_run(last) || last.size() < 2 || last.size() > 4) continue;

          PromptRecord r;
          r.id = static_cast<int>(out.size());
          r.comment = comment;
          r.code_prefix = line.substr(0, line.size() - last.size());
          r.target = last;
          r.target_id = ids.back();
          r.counterfactual = derive_counterfactual(last);
          r.counterfactual_id = vocab.id_of(r.counterfactual);
          r.sub_task = classify_subtask(last);
          r.constructor = ctor;
          r.n_open = depth;
          r.n_already_closed = static_cast<int>(std::count(r.code_prefix.begin(), r.code_prefix.end(), ')'));
          r.literal = lit;
          r.tuple_wrapper = wrap;
          r.tokens.reserve(ids.size());
          r.tokens.push_back(bos);
          r.tokens.insert(r.tokens.end(), ids.begin(), ids.end() - 1);
          out.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

std::vector<TokenId> training_sequence(const PromptRecord& r, const Vocab& vocab) {
  std::vector<TokenId> seq;
  seq.push_back(vocab.bos());
  auto body = tokenize(vocab, r.prompt_text() + r.target);
  seq.insert(seq.end(), body.begin(), body.end());
  return seq;
}

std::string to_jsonl_line(const PromptRecord& r) {
  json j;
  j["id"] = r.id;
  j["comment"] = r.comment;
  j["code_prefix"] = r.code_prefix;
  j["tokens"] = r.tokens;
  j["target"] = r.target;
  j["counterfactual"] = r.counterfactual;
  j["sub_task"] = to_string(r.sub_task);
  j["constructor"] = r.constructor;
  j["n_open"] = r.n_open;
  j["n_already_closed"] = r.n_already_closed;
  j["target_id"] = r.target_id;
  j["counterfactual_id"] = r.counterfactual_id;
  j["literal"] = r.literal;
  j["tuple_wrapper"] = r.tuple_wrapper;
  return j.dump();
}

PromptRecord from_jsonl_line(const std::string& line) {
  try {
    auto j = json::parse(line);
    PromptRecord r;
    r.id = j.at("id").get<int>();
    r.comment = j.at("comment").get<std::string>();
    r.code_prefix = j.at("code_prefix").get<std::string>();
    r.tokens = j.at("tokens").get<std::vector<TokenId>>();
    r.target = j.at("target").get<std::string>();
    r.counterfactual = j.at("counterfactual").get<std::string>();
    r.sub_task = parse_sub_task(j.at("sub_task").get<std::string>());
    r.constructor = j.at("constructor").get<std::string>();
    r.n_open = j.at("n_open").get<int>();
    r.n_already_closed = j.value("n_already_closed", 0);
    r.target_id = j.value("target_id", -1);
    r.counterfactual_id = j.value("counterfactual_id", -1);
    r.literal = j.value("literal", std::string{});
    r.tuple_wrapper = j.value("tuple_wrapper", false);
    return r;
  } catch (const json::exception& e) {
    throw MismatchError(std::string("malformed dataset record: ") + e.what());
  }
}

void write_jsonl(std::ostream& os, const std::vector<PromptRecord>& records) {
  for (const auto& r : records) os << to_jsonl_line(r) << '\n';
}

std::vector<PromptRecord> read_jsonl(std::istream& is) {
  std::vector<PromptRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(from_jsonl_line(line));
  }
  return out;
}

std::vector<PromptRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path);
  return read_jsonl(in);
}

void save_dataset(const std::string& path, const std::vector<PromptRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset " + path);
  write_jsonl(out, records);
}

void check_vocab_consistency(const std::vector<PromptRecord>& records, const Vocab& vocab) {
  for (const auto& r : records) {
    std::vector<TokenId> expect;
    try {
      expect.push_back(vocab.bos());
      auto body = tokenize(vocab, r.prompt_text());
      expect.insert(expect.end(), body.begin(), body.end());
    } catch (const Error& e) {
      throw MismatchError("prompt " + std::to_string(r.id) + " does not tokenize under the model vocabulary: " + e.what());
    }
    if (expect != r.tokens || vocab.id_of(r.target) != r.target_id ||
        vocab.id_of(r.counterfactual) != r.counterfactual_id || r.target_id < 0 || r.counterfactual_id < 0) {
      throw MismatchError("prompt " + std::to_string(r.id) +
                          ": recorded token ids disagree with the model vocabulary");
    }
  }
}

SubTaskCounts count_sub_tasks(const std::vector<PromptRecord>& records) {
  SubTaskCounts c;
  for (const auto& r : records) ++c[r.sub_task];
  return c;
}

double AccuracyReport::accuracy(SubTask s) const {
  return total[s] == 0 ? 0.0 : static_cast<double>(correct[s]) / total[s];
}

double AccuracyReport::overall() const {
  return total.total() == 0 ? 0.0 : static_cast<double>(correct.total()) / total.total();
}

template <typename T>
AccuracyReport evaluate_accuracy(const ModelWeights<T>& weights, const ModelConfig& config,
                                 const std::vector<PromptRecord>& dataset) {
  for (const auto& r : dataset) {
    for (auto t : r.tokens) {
      if (t < 0 || t >= config.vocab_size) {
        throw MismatchError("prompt " + std::to_string(r.id) + " uses token id " + std::to_string(t) +
                            " outside the model vocabulary");
      }
    }
    if (r.target_id < 0 || r.target_id >= config.vocab_size) {
      throw MismatchError("prompt " + std::to_string(r.id) + " target id outside the model vocabulary");
    }
  }
  AccuracyReport rep;
  rep.predictions.resize(dataset.size());
  detail::parallel_for(dataset.size(), [&](std::size_t i) {
    const auto& r = dataset[i];
    rep.predictions[i] = {r.id, r.sub_task, next_token(weights, config, r.tokens), r.target_id};
  });
  for (const auto& p : rep.predictions) {
    ++rep.total[p.sub_task];
    if (p.correct()) ++rep.correct[p.sub_task];
  }
  return rep;
}

template AccuracyReport evaluate_accuracy(const ModelWeights<float>&, const ModelConfig&,
                                          const std::vector<PromptRecord>&);
template AccuracyReport evaluate_accuracy(const ModelWeights<double>&, const ModelConfig&,
                                          const std::vector<PromptRecord>&);

}  // namespace parenlens
