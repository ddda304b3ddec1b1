#include "parenlens/experiments.hpp"

#include <algorithm>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "parallel.hpp"
#include "parenlens/svg.hpp"
#include "parenlens/weights_io.hpp"

namespace parenlens {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string counts_line(const SubTaskCounts& c) {
  std::ostringstream os;
  os << "Two " << c[SubTask::kTwo] << ", Three " << c[SubTask::kThree] << ", Four " << c[SubTask::kFour] << ", total "
     << c.total();
  return os.str();
}

// What the analyses keep per prompt once the activation cache is dropped.
struct PromptResult {
  double final_diff = 0;
  std::vector<int> ranks;
  Milestones milestones;
  AttributionReport curve;
  AttributionReport sublayer;
  HeadMatrix heads;
  std::vector<std::vector<float>> lens;  // per layer, resid_post lens logits
};

std::vector<PromptResult> analyze_all(const LoadedInputs& in, LensMode mode) {
  std::vector<PromptResult> out(in.records.size());
  detail::parallel_for(in.records.size(), [&](std::size_t i) {
    const auto& r = in.records[i];
    auto a = analyze_prompt(in.weights, in.config, r.tokens, r.target_id, r.counterfactual_id, mode);
    auto& p = out[i];
    p.final_diff = a.final_diff;
    p.ranks = std::move(a.ranks);
    p.milestones = a.milestones;
    p.curve = std::move(a.curve);
    p.sublayer = std::move(a.sublayer);
    p.heads = std::move(a.heads);
    for (int l = 0; l < in.config.n_layers; ++l) {
      auto logits = lens_logits(a.cache, in.weights, LensPoint::resid_post(l), mode);
      p.lens.emplace_back(logits.values());
    }
  });
  return out;
}

std::string manifest_path(const std::string& dir, const std::string& name) { return join(dir, name + "_manifest.json"); }

RunManifest analysis_manifest(const std::string& command, const AnalysisOptions& o) {
  auto m = RunManifest::make(command);
  m.config_hash = fnv1a_hex(to_string(o.mode) + "|" + (o.grouping == Grouping::kSubTask ? "subtask" : "prompt-type"));
  m.model_hash = file_hash(o.model_path);
  m.dataset_hash = file_hash(o.data_path);
  return m;
}

}  // namespace

std::string safe_name(const std::string& group) {
  std::string s;
  for (char c : group) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return s;
}

CommandResult run_gen_data(const GenDataOptions& o) {
  auto config = DatasetConfig::from_json(read_text_file(o.config_path));
  if (o.seed) config.seed = *o.seed;
  const auto vocab = build_vocab();
  auto records = generate(config, vocab);
  save_dataset(o.out_path, records);

  auto m = RunManifest::make("gen-data");
  m.config_hash = fnv1a_hex(config.to_json());
  m.seed = config.seed;
  m.dataset_hash = file_hash(o.out_path);
  const auto mpath = o.out_path + ".manifest.json";
  write_manifest(mpath, m);

  const auto c = count_sub_tasks(records);
  std::ostringstream os;
  os << "prompts: " << counts_line(c) << "\n";
  if (c.total() > 0) {
    os << "proportions: Two " << pct(double(c[SubTask::kTwo]) / c.total()) << ", Three "
       << pct(double(c[SubTask::kThree]) / c.total()) << ", Four " << pct(double(c[SubTask::kFour]) / c.total())
       << "\n";
  }
  os << "reference: 168 prompts = 56 + 84 + 28 (33.3% / 50.0% / 16.7%)\n";
  return {os.str(), {o.out_path, mpath}};
}

CommandResult run_train(const TrainOptions& o) {
  const auto vocab = build_vocab();
  auto records = load_dataset(o.data_path);
  check_vocab_consistency(records, vocab);
  std::vector<PromptRecord> heldout;
  if (!o.heldout_path.empty()) {
    heldout = load_dataset(o.heldout_path);
    check_vocab_consistency(heldout, vocab);
  }
  std::set<std::string> excluded;
  for (const auto& r : heldout) excluded.insert(r.prompt_text() + r.target);
  Batch corpus;
  for (const auto& r : records) {
    if (!excluded.count(r.prompt_text() + r.target)) corpus.push_back(training_sequence(r, vocab));
  }
  if (corpus.empty()) throw ConfigError("training corpus is empty after removing held-out prompts");

  ModelConfig mc = o.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  try {
    mc.validate();
    o.train.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  const auto& eval_set = heldout.empty() ? records : heldout;

  std::ostringstream log;
  ReportCallback cb = [&](const LossReport& r) {
    std::ostringstream line;
    line << "step " << r.step << " loss " << format_number(r.loss) << " acc Two " << format_number(r.acc_two)
         << " Three " << format_number(r.acc_three) << " Four " << format_number(r.acc_four) << "\n";
    log << line.str();
    if (!o.quiet) std::fputs(line.str().c_str(), stderr);
  };

  ModelWeights<float> trained;
  std::vector<LossReport> reports;
  if (o.train.precision == Precision::kF64) {
    auto res = train(init_random<double>(mc, o.train.seed), mc, o.train, corpus, eval_set, cb);
    trained = cast_weights<float>(res.weights);
    reports = std::move(res.reports);
  } else {
    auto res = train(init_random<float>(mc, o.train.seed), mc, o.train, corpus, eval_set, cb);
    trained = std::move(res.weights);
    reports = std::move(res.reports);
  }

  save_model(o.model_out, mc, trained, &vocab);
  const auto loss_csv = o.loss_csv.empty() ? o.model_out + ".loss.csv" : o.loss_csv;
  std::ostringstream csv;
  write_loss_csv(csv, reports);
  write_text_file(loss_csv, csv.str());

  auto m = RunManifest::make("train");
  json cfg;
  cfg["steps"] = o.train.steps;
  cfg["batch_size"] = o.train.batch_size;
  cfg["learning_rate"] = o.train.learning_rate;
  cfg["warmup_steps"] = o.train.warmup_steps;
  cfg["precision"] = o.train.precision == Precision::kF64 ? "f64" : "f32";
  cfg["model"] = json::parse(config_to_json(mc));
  m.config_hash = fnv1a_hex(cfg.dump());
  m.seed = o.train.seed;
  m.model_hash = file_hash(o.model_out);
  m.dataset_hash = file_hash(o.data_path);
  const auto mpath = o.model_out + ".manifest.json";
  write_manifest(mpath, m);

  const auto acc = evaluate_accuracy(trained, mc, eval_set);
  std::ostringstream os;
  os << "trained " << o.train.steps << " steps on " << corpus.size() << " sequences\n";
  os << "final accuracy (" << (heldout.empty() ? "training set" : "held-out set") << "): Two "
     << format_number(acc.accuracy(SubTask::kTwo)) << ", Three " << format_number(acc.accuracy(SubTask::kThree))
     << ", Four " << format_number(acc.accuracy(SubTask::kFour)) << "\n";
  return {os.str(), {o.model_out, loss_csv, mpath}};
}

LoadedInputs load_inputs(const std::string& model_path, const std::string& data_path) {
  auto file = load_model(model_path);
  LoadedInputs in{file.config, std::move(file.weights), build_vocab(), {}};
  if (file.vocab && !(*file.vocab == in.vocab)) {
    throw MismatchError("model vocabulary differs from the tokenizer's (" + std::to_string(file.vocab->size()) +
                        " vs " + std::to_string(in.vocab.size()) + " tokens)");
  }
  if (static_cast<std::size_t>(in.config.vocab_size) != in.vocab.size()) {
    throw MismatchError("model vocab_size " + std::to_string(in.config.vocab_size) + " does not match the tokenizer's " +
                        std::to_string(in.vocab.size()));
  }
  in.records = load_dataset(data_path);
  check_vocab_consistency(in.records, in.vocab);
  for (const auto& r : in.records) {
    if (static_cast<int>(r.tokens.size()) > in.config.context_len) {
      throw MismatchError("prompt " + std::to_string(r.id) + " is longer than the model context");
    }
  }
  return in;
}

CommandResult run_eval(const EvalOptions& o) {
  auto in = load_inputs(o.model_path, o.data_path);
  const auto acc = evaluate_accuracy(in.weights, in.config, in.records);
  std::vector<std::string> outputs;
  if (!o.out_csv.empty()) {
    CsvTable t({"prompt_id", "sub_task", "target", "predicted", "correct"});
    for (const auto& p : acc.predictions) {
      t.add_row({std::to_string(p.prompt_id), to_string(p.sub_task), in.vocab.token(p.target),
                 in.vocab.token(p.predicted), p.correct() ? "1" : "0"});
    }
    write_csv_file(o.out_csv, t);
    outputs.push_back(o.out_csv);
  }
  std::ostringstream os;
  for (auto s : kAllSubTasks) {
    os << to_string(s) << " Closing Paren: " << acc.correct[s] << "/" << acc.total[s] << " = "
       << pct(acc.accuracy(s)) << "\n";
  }
  os << "overall: " << pct(acc.overall()) << "\n";
  os << "reference (7B subject model): Two 100.0%, Three 76.2%, Four 100.0%\n";
  return {os.str(), outputs};
}

AnalysisTables compute_tables(const LoadedInputs& in, LensMode mode, Grouping grouping) {
  const auto results = analyze_all(in, mode);
  const int L = in.config.n_layers;
  AnalysisTables t;
  t.rq1 = CsvTable({"prompt_id", "sub_task", "group", "l_top10", "l_top1", "l_consistent_top1"});
  t.rq1_medians = CsvTable({"group", "n", "l_top10", "l_top1", "l_consistent_top1", "coverage_top10",
                            "coverage_top1", "coverage_consistent_top1"});
  t.rq1_lens = CsvTable({"prompt_id", "layer", "token_id", "logit"});
  t.rq2_prompts = CsvTable({"prompt_id", "group", "final_diff", "curve_last", "sublayer_sum"});
  t.rq2_curve = CsvTable({"group", "n", "point", "diff"});
  t.rq2_sublayer = CsvTable({"group", "n", "point", "diff"});
  t.rq3_heads = CsvTable({"group", "n", "layer", "head", "diff"});
  t.rq3_heads_per_prompt = CsvTable({"prompt_id", "group", "layer", "head", "diff"});
  t.groups = CsvTable({"group", "n"});

  std::vector<std::string> order;
  std::map<std::string, std::vector<Milestones>> by_group;
  std::vector<std::pair<std::string, AttributionReport>> curves, subs, heads;
  std::ostringstream jsonl;
  for (std::size_t i = 0; i < in.records.size(); ++i) {
    const auto& r = in.records[i];
    const auto& p = results[i];
    const auto g = group_key(r, grouping);
    const auto id = std::to_string(r.id);
    if (!by_group.count(g)) order.push_back(g);
    if (L > 0) {
      by_group[g].push_back(p.milestones);
      t.rq1.add_row({id, to_string(r.sub_task), g, std::to_string(p.milestones.l_top10),
                     std::to_string(p.milestones.l_top1), std::to_string(p.milestones.l_consistent_top1)});
    } else {
      by_group[g];
    }
    for (int l = 0; l < L; ++l) {
      const auto& logits = p.lens[static_cast<std::size_t>(l)];
      for (std::size_t v = 0; v < logits.size(); ++v) {
        t.rq1_lens.add_row({id, std::to_string(l), std::to_string(v), format_exact(logits[v])});
      }
    }
    t.rq2_prompts.add_row({id, g, format_number(p.final_diff), format_number(p.curve.entries.back().second),
                           format_number(p.sublayer.sum())});
    curves.emplace_back(g, p.curve);
    subs.emplace_back(g, p.sublayer);
    heads.emplace_back(g, to_report(p.heads, mode));
    for (int l = 0; l < p.heads.n_layers; ++l) {
      for (int h = 0; h < p.heads.n_heads; ++h) {
        t.rq3_heads_per_prompt.add_row(
            {id, g, std::to_string(l), std::to_string(h), format_number(p.heads.at(l, h))});
      }
    }
    json j;
    j["prompt_id"] = r.id;
    j["group"] = g;
    j["sub_task"] = to_string(r.sub_task);
    j["final_diff"] = rounded6(p.final_diff);
    for (const auto* rep : {&p.curve, &p.sublayer}) {
      json pts = json::array();
      for (const auto& [pt, d] : rep->entries) pts.push_back({pt.label(), rounded6(d)});
      j[rep == &p.curve ? "curve" : "sublayer"] = std::move(pts);
    }
    jsonl << j.dump() << "\n";
  }
  t.rq2_jsonl = jsonl.str();

  for (const auto& g : order) {
    const auto& ms = by_group[g];
    if (!ms.empty()) {
      const auto s = rq1_aggregate(g, ms, L);
      t.rq1_medians.add_row({g, std::to_string(s.n), std::to_string(s.median.l_top10), std::to_string(s.median.l_top1),
                             std::to_string(s.median.l_consistent_top1), format_number(s.coverage_top10),
                             format_number(s.coverage_top1), format_number(s.coverage_consistent_top1)});
    }
  }
  auto emit = [](CsvTable& table, const std::vector<AttributionReport>& agg) {
    for (const auto& a : agg) {
      for (const auto& [pt, d] : a.entries) table.add_row({a.group, std::to_string(a.n), pt.label(), format_number(d)});
    }
  };
  const auto agg_curve = aggregate(curves);
  for (const auto& a : agg_curve) t.groups.add_row({a.group, std::to_string(a.n)});
  emit(t.rq2_curve, agg_curve);
  emit(t.rq2_sublayer, aggregate(subs));
  for (const auto& a : aggregate(heads)) {
    for (const auto& [pt, d] : a.entries) {
      t.rq3_heads.add_row({a.group, std::to_string(a.n), std::to_string(pt.layer), std::to_string(pt.head),
                           format_number(d)});
    }
  }
  return t;
}

namespace {

// Sub-task medians of L_Top1 regardless of the requested grouping; the
// easier-sub-task ordering check is stated in those terms.
std::string ordering_check(const CsvTable& rq1, int n_layers) {
  std::map<std::string, std::vector<Milestones>> by;
  for (std::size_t i = 0; i < rq1.rows.size(); ++i) {
    by[rq1.cell(i, "sub_task")].push_back({std::stoi(rq1.cell(i, "l_top10")), std::stoi(rq1.cell(i, "l_top1")),
                                           std::stoi(rq1.cell(i, "l_consistent_top1"))});
  }
  std::ostringstream os;
  std::map<std::string, Milestones> med;
  for (const auto& [g, ms] : by) {
    const auto s = rq1_aggregate(g, ms, n_layers);
    med[g] = s.median;
    os << g << ": median L_Top10 " << s.median.l_top10 << ", L_Top1 " << s.median.l_top1 << ", L_ConsistentTop1 "
       << s.median.l_consistent_top1 << " (coverage " << format_number(s.coverage_top1) << ")\n";
    if (!(s.median.l_top10 <= s.median.l_top1 && s.median.l_top1 <= s.median.l_consistent_top1)) {
      os << "FLAG: " << g << " medians are not ordered L_Top10 <= L_Top1 <= L_ConsistentTop1\n";
    }
  }
  if (med.count("Two")) {
    for (const char* other : {"Three", "Four"}) {
      if (med.count(other) && med["Two"].l_top1 > med[other].l_top1) {
        os << "FLAG: median L_Top1 of Two (" << med["Two"].l_top1 << ") is later than " << other << " ("
           << med[other].l_top1 << ")\n";
      }
    }
  }
  return os.str();
}

}  // namespace

CommandResult run_rq1(const AnalysisOptions& o) {
  auto in = load_inputs(o.model_path, o.data_path);
  if (in.config.n_layers == 0) throw MismatchError("rq1 needs a model with at least one layer");
  ensure_dir(o.out_dir);
  const auto t = compute_tables(in, o.mode, o.grouping);
  CommandResult res;
  for (const auto& [name, table] : {std::pair{"rq1.csv", &t.rq1}, {"rq1_medians.csv", &t.rq1_medians},
                                    {"rq1_lens.csv", &t.rq1_lens}}) {
    write_csv_file(join(o.out_dir, name), *table);
    res.outputs.push_back(join(o.out_dir, name));
  }
  write_manifest(manifest_path(o.out_dir, "rq1"), analysis_manifest("rq1", o));
  res.outputs.push_back(manifest_path(o.out_dir, "rq1"));
  res.summary = "lens mode " + to_string(o.mode) + ", " + std::to_string(in.records.size()) + " prompts\n" +
                ordering_check(t.rq1, in.config.n_layers);
  return res;
}

CommandResult run_rq2(const AnalysisOptions& o) {
  auto in = load_inputs(o.model_path, o.data_path);
  ensure_dir(o.out_dir);
  const auto t = compute_tables(in, o.mode, o.grouping);
  CommandResult res;
  for (const auto& [name, table] : {std::pair{"rq2_curve.csv", &t.rq2_curve}, {"rq2_sublayer.csv", &t.rq2_sublayer},
                                    {"rq2_prompts.csv", &t.rq2_prompts}, {"groups.csv", &t.groups}}) {
    write_csv_file(join(o.out_dir, name), *table);
    res.outputs.push_back(join(o.out_dir, name));
  }
  write_text_file(join(o.out_dir, "rq2_per_prompt.jsonl"), t.rq2_jsonl);
  res.outputs.push_back(join(o.out_dir, "rq2_per_prompt.jsonl"));
  // The figures are drawn from the files just written, not from memory.
  const auto curve = read_csv_file(join(o.out_dir, "rq2_curve.csv"));
  const auto sub = read_csv_file(join(o.out_dir, "rq2_sublayer.csv"));
  write_text_file(join(o.out_dir, "rq2_curve.svg"),
                  render_line_chart(curve, "group", "point", "diff", "Logit difference along the residual stream"));
  write_text_file(join(o.out_dir, "rq2_sublayer.svg"),
                  render_line_chart(sub, "group", "point", "diff", "Logit difference per sub-layer"));
  res.outputs.push_back(join(o.out_dir, "rq2_curve.svg"));
  res.outputs.push_back(join(o.out_dir, "rq2_sublayer.svg"));
  write_manifest(manifest_path(o.out_dir, "rq2"), analysis_manifest("rq2", o));
  res.outputs.push_back(manifest_path(o.out_dir, "rq2"));

  double worst = 0;
  for (std::size_t i = 0; i < t.rq2_prompts.rows.size(); ++i) {
    worst = std::max(worst, std::abs(std::stod(t.rq2_prompts.cell(i, "final_diff")) -
                                     std::stod(t.rq2_prompts.cell(i, "sublayer_sum"))));
  }
  std::ostringstream os;
  os << "lens mode " << to_string(o.mode) << ", " << t.groups.rows.size() << " groups, " << in.records.size()
     << " prompts\n";
  os << "max |final diff - sum of sub-layer diffs|: " << format_number(worst) << "\n";
  res.summary = os.str();
  return res;
}

CommandResult run_rq3(const AnalysisOptions& o) {
  auto in = load_inputs(o.model_path, o.data_path);
  if (in.config.n_layers == 0) throw MismatchError("rq3 needs a model with at least one layer");
  ensure_dir(o.out_dir);
  const auto t = compute_tables(in, o.mode, o.grouping);
  CommandResult res;
  for (const auto& [name, table] : {std::pair{"rq3_heads.csv", &t.rq3_heads},
                                    {"rq3_heads_per_prompt.csv", &t.rq3_heads_per_prompt}, {"groups.csv", &t.groups}}) {
    write_csv_file(join(o.out_dir, name), *table);
    res.outputs.push_back(join(o.out_dir, name));
  }
  const auto heads = read_csv_file(join(o.out_dir, "rq3_heads.csv"));
  std::ostringstream os;
  os << "lens mode " << to_string(o.mode) << "\n";
  for (std::size_t g = 0; g < t.groups.rows.size(); ++g) {
    const auto& group = t.groups.rows[g][0];
    const auto sub = heads.filter("group", group);
    const auto path = join(o.out_dir, "rq3_heads_" + safe_name(group) + ".svg");
    write_text_file(path, render_heatmap(sub, "layer", "head", "diff", "Head logit difference: " + group));
    res.outputs.push_back(path);
    std::size_t best = 0;
    for (std::size_t i = 1; i < sub.rows.size(); ++i) {
      if (std::stod(sub.cell(i, "diff")) > std::stod(sub.cell(best, "diff"))) best = i;
    }
    if (!sub.rows.empty()) {
      os << group << ": top head L" << sub.cell(best, "layer") << "H" << sub.cell(best, "head") << " ("
         << sub.cell(best, "diff") << ")\n";
    }
  }
  write_manifest(manifest_path(o.out_dir, "rq3"), analysis_manifest("rq3", o));
  res.outputs.push_back(manifest_path(o.out_dir, "rq3"));
  res.summary = os.str();
  return res;
}

CommandResult run_attn(const AttnOptions& o) {
  auto in = load_inputs(o.model_path, o.data_path);
  auto it = std::find_if(in.records.begin(), in.records.end(), [&](const PromptRecord& r) { return r.id == o.prompt_id; });
  if (it == in.records.end()) throw OutOfRangeError("no prompt with id " + std::to_string(o.prompt_id));
  if (o.layer < 0 || o.layer >= in.config.n_layers) {
    throw OutOfRangeError("layer " + std::to_string(o.layer) + " out of range [0, " +
                          std::to_string(in.config.n_layers) + ")");
  }
  if (o.head < 0 || o.head >= in.config.n_heads) {
    throw OutOfRangeError("head " + std::to_string(o.head) + " out of range [0, " + std::to_string(in.config.n_heads) +
                          ")");
  }
  auto fr = forward(in.weights, in.config, it->tokens, CacheMode::kFull);
  const auto M = attention_matrix(*fr.cache, o.layer, o.head);
  const int seq = static_cast<int>(it->tokens.size());
  const int q = o.query.value_or(seq - 1);
  if (q < 0 || q >= seq) throw OutOfRangeError("query position " + std::to_string(q) + " out of range");

  auto tok = [&](std::size_t pos) { return in.vocab.token(it->tokens[pos]); };
  CsvTable pattern({"key_pos", "weight", "token_string"});
  for (int k = 0; k < seq; ++k) pattern.add_row({std::to_string(k), format_number(M(q, k)), tok(k)});
  CsvTable matrix({"query_pos", "key_pos", "weight", "query_token", "key_token"});
  for (int qq = 0; qq < seq; ++qq) {
    for (int k = 0; k < seq; ++k) {
      matrix.add_row({std::to_string(qq), std::to_string(k), format_number(M(qq, k)), tok(qq), tok(k)});
    }
  }
  const fs::path svg(o.out_svg);
  if (svg.has_parent_path()) ensure_dir(svg.parent_path().string());
  const auto stem = (svg.parent_path() / svg.stem()).string();
  const auto pattern_path = stem + ".csv", matrix_path = stem + "_matrix.csv";
  write_csv_file(pattern_path, pattern);
  write_csv_file(matrix_path, matrix);
  const auto title = "Attention L" + std::to_string(o.layer) + "H" + std::to_string(o.head) + ", prompt " +
                     std::to_string(o.prompt_id);
  write_text_file(o.out_svg, render_attention(read_csv_file(matrix_path), title));

  auto m = RunManifest::make("attn");
  m.config_hash = fnv1a_hex(std::to_string(o.prompt_id) + "|" + std::to_string(o.layer) + "|" +
                            std::to_string(o.head) + "|" + std::to_string(q));
  m.model_hash = file_hash(o.model_path);
  m.dataset_hash = file_hash(o.data_path);
  write_manifest(stem + "_manifest.json", m);

  std::size_t best = 0;
  for (int k = 1; k <= q; ++k) {
    if (M(q, k) > M(q, best)) best = static_cast<std::size_t>(k);
  }
  std::ostringstream os;
  os << "prompt " << o.prompt_id << " query " << q << " (" << tok(q) << "): argmax key " << best << " '" << tok(best)
     << "' weight " << format_number(M(q, best)) << "\n";
  return {os.str(), {pattern_path, matrix_path, o.out_svg, stem + "_manifest.json"}};
}

}  // namespace parenlens
