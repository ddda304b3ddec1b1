// Command-line front end. Talks to the library only through parenlens.h.
#include <CLI11.hpp>
#include <cstdio>
#include <json.hpp>
#include <optional>
#include <string>

#include "parenlens/parenlens.h"

using json = nlohmann::json;

namespace {

// Exit-code contract: 0 ok, 2 config error, 3 training failure, 4 data/model mismatch.
int exit_code(pl_status s) {
  switch (s) {
    case PL_OK: return 0;
    case PL_ERR_CONFIG:
    case PL_ERR_INVALID_ARGUMENT:
    case PL_ERR_IO: return 2;
    case PL_ERR_TRAINING: return 3;
    case PL_ERR_MISMATCH:
    case PL_ERR_SHAPE:
    case PL_ERR_NOT_FOUND:
    case PL_ERR_OUT_OF_RANGE: return 4;
    default: return 1;
  }
}

int finish(pl_status s, char* summary) {
  if (s == PL_OK) {
    if (summary) std::fputs(summary, stdout);
  } else {
    std::fprintf(stderr, "error: %s\n", pl_last_error());
  }
  pl_string_free(summary);
  return exit_code(s);
}

template <typename Fn>
int call(Fn&& fn, const json& opts) {
  char* summary = nullptr;
  const auto s = fn(opts.dump().c_str(), &summary);
  return finish(s, summary);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parenlens: closing-parenthesis interpretability workbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pl_version()));
  unsigned workers = 0;
  app.add_option("--workers", workers, "Worker threads for per-prompt loops (0 = all cores)");

  json opts = json::object();
  std::string s1, s2, s3, s4;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic prompt dataset");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--config", gen_config, "Dataset config JSON")->required();
  gen->add_option("--out", gen_out, "Output JSONL path")->required();
  gen->add_option("--seed", gen_seed, "Seed recorded in the manifest");

  auto* tr = app.add_subcommand("train", "Train the tiny model");
  std::string tr_data, tr_out, tr_loss, tr_heldout, tr_precision = "f32";
  int steps = 3000, batch = 16, warmup = 100, eval_every = 250;
  double lr = 1e-3;
  std::uint64_t tr_seed = 0;
  std::optional<int> n_layers, n_heads, d_model, d_head, d_ff;
  bool quiet = false;
  tr->add_option("--data", tr_data, "Training JSONL")->required();
  tr->add_option("--model-out", tr_out, "Output MIW1 path")->required();
  tr->add_option("--loss-csv", tr_loss, "Loss CSV path (default <model-out>.loss.csv)");
  tr->add_option("--heldout", tr_heldout, "JSONL removed from the corpus and used for accuracy");
  tr->add_option("--steps", steps)->capture_default_str();
  tr->add_option("--batch", batch)->capture_default_str();
  tr->add_option("--lr", lr)->capture_default_str();
  tr->add_option("--warmup", warmup)->capture_default_str();
  tr->add_option("--eval-every", eval_every)->capture_default_str();
  tr->add_option("--seed", tr_seed)->capture_default_str();
  tr->add_option("--precision", tr_precision)->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
  tr->add_option("--n-layers", n_layers);
  tr->add_option("--n-heads", n_heads);
  tr->add_option("--d-model", d_model);
  tr->add_option("--d-head", d_head);
  tr->add_option("--d-ff", d_ff);
  tr->add_flag("--quiet", quiet, "No progress lines on stderr");

  auto* ev = app.add_subcommand("eval", "Greedy accuracy per sub-task");
  std::string ev_model, ev_data, ev_out;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--out", ev_out, "Per-prompt predictions CSV");

  std::string rq_model, rq_data, rq_out, rq_mode = "frozen", rq_group = "subtask";
  CLI::App* rq[3];
  for (int i = 0; i < 3; ++i) {
    static const char* help[] = {"Layer milestones of the target token", "Logit difference per layer and sub-layer",
                                 "Logit difference per attention head"};
    rq[i] = app.add_subcommand("rq" + std::to_string(i + 1), help[i]);
    rq[i]->add_option("--model", rq_model)->required();
    rq[i]->add_option("--data", rq_data)->required();
    rq[i]->add_option("--out", rq_out, "Output directory")->required();
    rq[i]->add_option("--mode", rq_mode)->check(CLI::IsMember({"frozen", "raw"}))->capture_default_str();
    rq[i]->add_option("--group", rq_group)->check(CLI::IsMember({"subtask", "prompt-type"}))->capture_default_str();
  }

  auto* at = app.add_subcommand("attn", "Attention pattern of one head on one prompt");
  std::string at_model, at_data, at_out;
  int prompt_id = 0, layer = 0, head = 0;
  std::optional<int> query;
  at->add_option("--model", at_model)->required();
  at->add_option("--data", at_data)->required();
  at->add_option("--prompt-id", prompt_id)->required();
  at->add_option("--layer", layer)->required();
  at->add_option("--head", head)->required();
  at->add_option("--query", query, "Query position (default: last)");
  at->add_option("--out", at_out, "Output SVG; CSVs are written beside it")->required();

  auto* sv = app.add_subcommand("serve", "HTTP inspection server");
  std::string sv_model, sv_data, sv_host = "127.0.0.1", sv_static;
  int port = 8080;
  sv->add_option("--model", sv_model);
  sv->add_option("--data", sv_data);
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--port", port)->capture_default_str();
  sv->add_option("--static", sv_static, "Directory served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  pl_set_workers(workers);

  if (gen->parsed()) {
    opts["config"] = gen_config;
    opts["out"] = gen_out;
    if (gen_seed) opts["seed"] = *gen_seed;
    return call(pl_cmd_gen_data, opts);
  }
  if (tr->parsed()) {
    opts = {{"data", tr_data}, {"model_out", tr_out}, {"steps", steps}, {"batch", batch}, {"lr", lr},
            {"warmup", warmup}, {"eval_every", eval_every}, {"seed", tr_seed}, {"precision", tr_precision},
            {"quiet", quiet}};
    if (!tr_loss.empty()) opts["loss_csv"] = tr_loss;
    if (!tr_heldout.empty()) opts["heldout"] = tr_heldout;
    if (n_layers) opts["n_layers"] = *n_layers;
    if (n_heads) opts["n_heads"] = *n_heads;
    if (d_model) opts["d_model"] = *d_model;
    if (d_head) opts["d_head"] = *d_head;
    if (d_ff) opts["d_ff"] = *d_ff;
    return call(pl_cmd_train, opts);
  }
  if (ev->parsed()) {
    opts = {{"model", ev_model}, {"data", ev_data}};
    if (!ev_out.empty()) opts["out"] = ev_out;
    return call(pl_cmd_eval, opts);
  }
  for (int i = 0; i < 3; ++i) {
    if (rq[i]->parsed()) {
      opts = {{"model", rq_model}, {"data", rq_data}, {"out", rq_out}, {"mode", rq_mode}, {"group", rq_group}};
      return call([i](const char* o, char** s) { return pl_cmd_rq(i + 1, o, s); }, opts);
    }
  }
  if (at->parsed()) {
    opts = {{"model", at_model}, {"data", at_data}, {"prompt_id", prompt_id}, {"layer", layer}, {"head", head},
            {"out", at_out}};
    if (query) opts["query"] = *query;
    return call(pl_cmd_attn, opts);
  }
  if (sv->parsed()) {
    opts = {{"host", sv_host}, {"port", port}};
    if (!sv_model.empty()) opts["model"] = sv_model;
    if (!sv_data.empty()) opts["data"] = sv_data;
    if (!sv_static.empty()) opts["static"] = sv_static;
    return finish(pl_cmd_serve(opts.dump().c_str()), nullptr);
  }
  return 2;
}
