#include "parenlens/parenlens.h"

#include <cstring>
#include <json.hpp>
#include <set>

#include "parallel.hpp"
#include "parenlens/experiments.hpp"
#include "parenlens/server.hpp"
#include "parenlens/weights_io.hpp"

using namespace parenlens;
using json = nlohmann::json;

struct pl_model {
  std::unique_ptr<InspectService> service;
};

struct pl_dataset {
  std::vector<PromptRecord> records;
};

namespace {

thread_local std::string g_last_error;

pl_status fail(pl_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

char* dup(const std::string& s) {
  auto* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

template <typename Fn>
pl_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return PL_OK;
  } catch (const Error& e) {
    return fail(static_cast<pl_status>(e.kind()), e.what());
  } catch (const json::exception& e) {
    return fail(PL_ERR_CONFIG, std::string("options: ") + e.what());
  } catch (const std::exception& e) {
    return fail(PL_ERR_INTERNAL, e.what());
  }
}

// Options object with a closed key set, so a typo is a config error rather
// than a silently ignored flag.
class Options {
 public:
  Options(const char* text, std::set<std::string> allowed) {
    if (!text) throw ConfigError("options are missing");
    try {
      j_ = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("options are not valid JSON: ") + e.what());
    }
    if (!j_.is_object()) throw ConfigError("options must be a JSON object");
    for (auto& [k, v] : j_.items()) {
      if (!allowed.count(k)) throw ConfigError("unknown option '" + k + "'");
    }
  }
  bool has(const std::string& k) const { return j_.contains(k) && !j_[k].is_null(); }
  template <typename T>
  T get(const std::string& k, T fallback) const {
    return has(k) ? j_[k].get<T>() : fallback;
  }
  std::string need(const std::string& k) const {
    if (!has(k)) throw ConfigError("option '" + k + "' is required");
    return j_[k].get<std::string>();
  }

 private:
  json j_;
};

pl_status write_out(char** out, const std::string& s) {
  if (out) *out = dup(s);
  return PL_OK;
}

AnalysisOptions analysis_options(const Options& o) {
  AnalysisOptions a;
  a.model_path = o.need("model");
  a.data_path = o.need("data");
  a.out_dir = o.need("out");
  try {
    a.mode = parse_lens_mode(o.get<std::string>("mode", "frozen"));
    a.grouping = parse_grouping(o.get<std::string>("group", "subtask"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return a;
}

}  // namespace

extern "C" {

const char* pl_version(void) { return PARENLENS_VERSION; }
const char* pl_last_error(void) { return g_last_error.c_str(); }
void pl_string_free(char* s) { std::free(s); }
void pl_set_workers(unsigned n) { detail::worker_setting() = n; }

pl_status pl_model_load(const char* path, pl_model** out) {
  if (!path || !out) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    auto file = load_model(path);
    if (file.vocab && !(*file.vocab == build_vocab())) throw MismatchError("model vocabulary differs from the tokenizer's");
    auto m = std::make_unique<pl_model>();
    m->service = std::make_unique<InspectService>(
        InspectService::Loaded{file.config, std::move(file.weights)}, std::vector<PromptRecord>{});
    *out = m.release();
  });
}

void pl_model_free(pl_model* m) { delete m; }

pl_status pl_model_info_json(const pl_model* m, char** out_json) {
  if (!m || !out_json) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { write_out(out_json, m->service->model_info().body); });
}

pl_status pl_dataset_generate(const char* config_json, pl_dataset** out) {
  if (!config_json || !out) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    auto d = std::make_unique<pl_dataset>();
    d->records = generate(DatasetConfig::from_json(config_json), build_vocab());
    *out = d.release();
  });
}

pl_status pl_dataset_load(const char* path, pl_dataset** out) {
  if (!path || !out) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    auto d = std::make_unique<pl_dataset>();
    d->records = load_dataset(path);
    *out = d.release();
  });
}

pl_status pl_dataset_save(const pl_dataset* d, const char* path) {
  if (!d || !path) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { save_dataset(path, d->records); });
}

void pl_dataset_free(pl_dataset* d) { delete d; }

size_t pl_dataset_size(const pl_dataset* d) { return d ? d->records.size() : 0; }

pl_status pl_dataset_record_json(const pl_dataset* d, size_t index, char** out_json) {
  if (!d || !out_json) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  if (index >= d->records.size()) {
    return fail(PL_ERR_OUT_OF_RANGE, "record " + std::to_string(index) + " of " + std::to_string(d->records.size()));
  }
  return guarded([&] { write_out(out_json, to_jsonl_line(d->records[index])); });
}

pl_status pl_tokenize(const char* text, char** out_ids_json) {
  if (!text || !out_ids_json) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { write_out(out_ids_json, json(tokenize(build_vocab(), text)).dump()); });
}

pl_status pl_detokenize(const char* ids_json, char** out_text) {
  if (!ids_json || !out_text) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::vector<TokenId> ids;
    try {
      ids = json::parse(ids_json).get<std::vector<TokenId>>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("ids must be a JSON array of integers: ") + e.what());
    }
    write_out(out_text, detokenize(build_vocab(), ids));
  });
}

pl_status pl_analyze(const pl_model* m, const char* request_json, char** out_json) {
  if (!m || !request_json || !out_json) return fail(PL_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const auto r = m->service->analyze(request_json);
    if (r.status != 200) {
      const auto msg = json::parse(r.body).value("error", std::string("analysis failed"));
      if (r.status == 503) throw Error(ErrorKind::kNotFound, msg);
      throw InvalidArgument(msg);
    }
    write_out(out_json, r.body);
  });
}

pl_status pl_cmd_gen_data(const char* options_json, char** out_summary) {
  return guarded([&] {
    Options o(options_json, {"config", "out", "seed"});
    GenDataOptions g;
    g.config_path = o.need("config");
    g.out_path = o.need("out");
    if (o.has("seed")) g.seed = o.get<std::uint64_t>("seed", 0);
    write_out(out_summary, run_gen_data(g).summary);
  });
}

pl_status pl_cmd_train(const char* options_json, char** out_summary) {
  return guarded([&] {
    Options o(options_json, {"data", "model_out", "loss_csv", "heldout", "steps", "batch", "lr", "warmup", "seed",
                             "precision", "eval_every", "n_layers", "n_heads", "d_model", "d_head", "d_ff",
                             "context_len", "quiet"});
    TrainOptions t;
    t.data_path = o.need("data");
    t.model_out = o.need("model_out");
    t.loss_csv = o.get<std::string>("loss_csv", "");
    t.heldout_path = o.get<std::string>("heldout", "");
    t.train.steps = o.get("steps", t.train.steps);
    t.train.batch_size = o.get("batch", t.train.batch_size);
    t.train.learning_rate = o.get("lr", t.train.learning_rate);
    t.train.warmup_steps = o.get("warmup", t.train.warmup_steps);
    t.train.seed = o.get<std::uint64_t>("seed", t.train.seed);
    t.train.eval_every = o.get("eval_every", t.train.eval_every);
    const auto precision = o.get<std::string>("precision", "f32");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
    t.train.precision = precision == "f64" ? Precision::kF64 : Precision::kF32;
    t.model = ModelConfig::tiny_default(0);
    t.model.n_layers = o.get("n_layers", t.model.n_layers);
    t.model.n_heads = o.get("n_heads", t.model.n_heads);
    t.model.d_model = o.get("d_model", t.model.d_model);
    t.model.d_head = o.get("d_head", t.model.d_head);
    t.model.d_ff = o.get("d_ff", t.model.d_ff);
    t.model.context_len = o.get("context_len", t.model.context_len);
    t.quiet = o.get("quiet", false);
    write_out(out_summary, run_train(t).summary);
  });
}

pl_status pl_cmd_eval(const char* options_json, char** out_summary) {
  return guarded([&] {
    Options o(options_json, {"model", "data", "out"});
    EvalOptions e{o.need("model"), o.need("data"), o.get<std::string>("out", "")};
    write_out(out_summary, run_eval(e).summary);
  });
}

pl_status pl_cmd_rq(int which, const char* options_json, char** out_summary) {
  if (which < 1 || which > 3) return fail(PL_ERR_INVALID_ARGUMENT, "rq must be 1, 2 or 3");
  return guarded([&] {
    Options o(options_json, {"model", "data", "out", "mode", "group"});
    const auto a = analysis_options(o);
    const auto r = which == 1 ? run_rq1(a) : which == 2 ? run_rq2(a) : run_rq3(a);
    write_out(out_summary, r.summary);
  });
}

pl_status pl_cmd_attn(const char* options_json, char** out_summary) {
  return guarded([&] {
    Options o(options_json, {"model", "data", "prompt_id", "layer", "head", "query", "out"});
    AttnOptions a;
    a.model_path = o.need("model");
    a.data_path = o.need("data");
    a.out_svg = o.need("out");
    a.prompt_id = o.get("prompt_id", 0);
    a.layer = o.get("layer", 0);
    a.head = o.get("head", 0);
    if (o.has("query")) a.query = o.get("query", 0);
    write_out(out_summary, run_attn(a).summary);
  });
}

pl_status pl_cmd_serve(const char* options_json) {
  return guarded([&] {
    Options o(options_json, {"model", "data", "host", "port", "static"});
    std::optional<InspectService::Loaded> model;
    if (o.has("model")) {
      auto file = load_model(o.need("model"));
      if (file.vocab && !(*file.vocab == build_vocab())) {
        throw MismatchError("model vocabulary differs from the tokenizer's");
      }
      model = InspectService::Loaded{file.config, std::move(file.weights)};
    }
    std::vector<PromptRecord> records;
    if (o.has("data")) records = load_dataset(o.need("data"));
    InspectService service(std::move(model), std::move(records));
    ServeOptions s;
    s.host = o.get<std::string>("host", s.host);
    s.port = o.get("port", s.port);
    s.static_dir = o.get<std::string>("static", "");
    run_server(service, s);
  });
}

}  // extern "C"
