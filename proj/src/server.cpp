#include "parenlens/server.hpp"

#include <charconv>
#include <filesystem>
#include <httplib.h>
#include <json.hpp>

#include "parenlens/report.hpp"
#include "parenlens/weights_io.hpp"

namespace parenlens {

using json = nlohmann::ordered_json;

namespace {

HttpReply error_reply(int status, const std::string& message) {
  json j;
  j["error"] = message;
  return {status, j.dump()};
}

// Numbers leave the server at six significant digits, like the CSVs.
json num(double v) { return rounded6(v); }

std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

json report_json(const AttributionReport& r) {
  json a = json::array();
  for (const auto& [pt, d] : r.entries) a.push_back({{"point", pt.label()}, {"diff", num(d)}});
  return a;
}

}  // namespace

InspectService::InspectService(std::optional<Loaded> model, std::vector<PromptRecord> dataset,
                               std::size_t max_sessions)
    : model_(std::move(model)), dataset_(std::move(dataset)), vocab_(build_vocab()), max_sessions_(max_sessions) {
  if (max_sessions_ == 0) throw InvalidArgument("session store needs room for at least one session");
  if (model_) {
    check_shapes(model_->weights, model_->config);
    if (static_cast<std::size_t>(model_->config.vocab_size) != vocab_.size()) {
      throw MismatchError("model vocab_size " + std::to_string(model_->config.vocab_size) +
                          " does not match the tokenizer's " + std::to_string(vocab_.size()));
    }
  }
  check_vocab_consistency(dataset_, vocab_);
}

HttpReply InspectService::model_info() const {
  if (!model_) return error_reply(503, "no model loaded");
  json j;
  j["config"] = json::parse(config_to_json(model_->config));
  j["n_layers"] = model_->config.n_layers;
  j["n_heads"] = model_->config.n_heads;
  j["vocab_size"] = vocab_.size();
  j["vocab"] = vocab_.tokens();
  const auto c = count_sub_tasks(dataset_);
  j["dataset"] = {{"total", c.total()},
                  {"Two", c[SubTask::kTwo]},
                  {"Three", c[SubTask::kThree]},
                  {"Four", c[SubTask::kFour]}};
  return {200, j.dump()};
}

HttpReply InspectService::analyze(const std::string& body) {
  if (!model_) return error_reply(503, "no model loaded");
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error_reply(400, "request body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("prompt") || !req["prompt"].is_string()) {
    return error_reply(400, "request needs a string field 'prompt'");
  }
  const auto prompt = req["prompt"].get<std::string>();
  if (prompt.empty()) return error_reply(400, "prompt is empty");

  std::vector<TokenId> tokens{vocab_.bos()};
  try {
    auto body_ids = tokenize(vocab_, prompt);
    tokens.insert(tokens.end(), body_ids.begin(), body_ids.end());
  } catch (const InvalidArgument& e) {
    return error_reply(400, e.what());
  }
  const auto& cfg = model_->config;
  if (static_cast<int>(tokens.size()) > cfg.context_len) return error_reply(400, "prompt exceeds the model context");

  LensMode mode = LensMode::kFrozenFinalNorm;
  try {
    if (req.contains("mode") && !req["mode"].is_null()) mode = parse_lens_mode(req["mode"].get<std::string>());
  } catch (const std::exception& e) {
    return error_reply(400, e.what());
  }

  auto resolve = [&](const char* field, TokenId& out) -> std::optional<HttpReply> {
    if (!req.contains(field) || req[field].is_null()) return std::nullopt;
    if (!req[field].is_string()) return error_reply(400, std::string(field) + " must be a token string");
    out = vocab_.id_of(req[field].get<std::string>());
    if (out < 0) return error_reply(400, std::string(field) + " '" + req[field].get<std::string>() + "' is not a token");
    return std::nullopt;
  };
  TokenId target = -1, cf = -1;
  if (auto e = resolve("target", target)) return *e;
  if (auto e = resolve("counterfactual", cf)) return *e;
  if (target < 0 || cf < 0) {
    const auto logits = forward(model_->weights, cfg, tokens).logits;
    const auto last = logits.row(tokens.size() - 1);
    if (target < 0) target = argmax_lowest<float>(last);
    if (cf < 0) {
      for (const auto& [id, v] : top_k_indices<float>(last, 2)) {
        if (static_cast<TokenId>(id) != target) {
          cf = static_cast<TokenId>(id);
          break;
        }
      }
    }
  }
  if (target == cf) return error_reply(422, "target and counterfactual are the same token");

  const std::string key = prompt + '\x1f' + std::to_string(target) + '\x1f' + std::to_string(cf) + '\x1f' +
                          to_string(mode);
  const auto id = fnv1a_hex(key);
  if (auto s = find(id)) return {200, s->response};

  auto a = std::make_shared<PromptAnalysis<float>>(analyze_prompt(model_->weights, cfg, tokens, target, cf, mode));
  json j;
  j["session_id"] = id;
  j["prompt"] = prompt;
  j["mode"] = to_string(mode);
  json toks = json::array();
  for (auto t : tokens) toks.push_back(vocab_.token(t));
  j["tokens"] = std::move(toks);
  j["token_ids"] = tokens;
  j["target"] = {{"token", vocab_.token(target)}, {"id", target}};
  j["counterfactual"] = {{"token", vocab_.token(cf)}, {"id", cf}};
  j["final_diff"] = num(a->final_diff);
  j["rank_trajectory"] = a->ranks;
  if (cfg.n_layers > 0) {
    j["milestones"] = {{"l_top10", a->milestones.l_top10},
                       {"l_top1", a->milestones.l_top1},
                       {"l_consistent_top1", a->milestones.l_consistent_top1}};
  } else {
    j["milestones"] = nullptr;
  }
  json topk = json::array();
  const std::size_t k = std::min<std::size_t>(10, vocab_.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto logits = lens_logits(a->cache, model_->weights, LensPoint::resid_post(l), mode);
    json row = json::array();
    for (const auto& [tid, v] : top_k_indices<float>(logits.data(), k)) {
      row.push_back({{"token", vocab_.token(static_cast<TokenId>(tid))}, {"id", tid}, {"logit", num(v)}});
    }
    topk.push_back({{"layer", l}, {"top", std::move(row)}});
  }
  j["lens_topk"] = std::move(topk);
  json heads = json::array();
  for (int l = 0; l < a->heads.n_layers; ++l) {
    json row = json::array();
    for (int h = 0; h < a->heads.n_heads; ++h) row.push_back(num(a->heads.at(l, h)));
    heads.push_back(std::move(row));
  }
  j["head_diffs"] = std::move(heads);
  j["sublayer"] = report_json(a->sublayer);
  j["curve"] = report_json(a->curve);

  auto s = std::make_shared<AnalysisSession>();
  s->id = id;
  s->prompt = prompt;
  s->tokens = tokens;
  s->mode = mode;
  s->analysis = std::move(a);
  s->response = j.dump();
  insert(s);
  return {200, s->response};
}

HttpReply InspectService::attention(const std::string& session_id, const std::string& layer_s,
                                    const std::string& head_s) {
  auto s = find(session_id);
  if (!s) return error_reply(404, "unknown session '" + session_id + "'");
  const auto layer = parse_int(layer_s), head = parse_int(head_s);
  if (!layer || !head) return error_reply(400, "layer and head must be integers");
  const auto& cache = s->analysis->cache;
  if (*layer < 0 || *layer >= static_cast<long long>(cache.layers.size())) {
    return error_reply(416, "layer " + layer_s + " out of range");
  }
  const auto n_heads = static_cast<long long>(cache.layers[static_cast<std::size_t>(*layer)].attn_pattern.dim(0));
  if (*head < 0 || *head >= n_heads) return error_reply(416, "head " + head_s + " out of range");

  const auto M = attention_matrix(cache, static_cast<int>(*layer), static_cast<int>(*head));
  json pattern = json::array();
  for (std::size_t q = 0; q < M.dim(0); ++q) {
    json row = json::array();
    for (float v : M.row(q)) row.push_back(num(v));
    pattern.push_back(std::move(row));
  }
  json j;
  j["session_id"] = session_id;
  j["layer"] = *layer;
  j["head"] = *head;
  json toks = json::array();
  for (auto t : s->tokens) toks.push_back(vocab_.token(t));
  j["tokens"] = std::move(toks);
  j["pattern"] = std::move(pattern);
  return {200, j.dump()};
}

HttpReply InspectService::prompts(const std::string& sub_task, const std::string& limit_s,
                                  const std::string& offset_s) const {
  std::optional<SubTask> filter;
  if (!sub_task.empty()) {
    try {
      filter = parse_sub_task(sub_task);
    } catch (const InvalidArgument& e) {
      return error_reply(400, e.what());
    }
  }
  long long limit = 50, offset = 0;
  if (!limit_s.empty()) {
    auto v = parse_int(limit_s);
    if (!v || *v < 0) return error_reply(400, "limit must be a non-negative integer");
    limit = *v;
  }
  if (!offset_s.empty()) {
    auto v = parse_int(offset_s);
    if (!v || *v < 0) return error_reply(400, "offset must be a non-negative integer");
    offset = *v;
  }
  json list = json::array();
  long long total = 0;
  for (const auto& r : dataset_) {
    if (filter && r.sub_task != *filter) continue;
    if (total >= offset && total < offset + limit) list.push_back(json::parse(to_jsonl_line(r)));
    ++total;
  }
  json j;
  j["total"] = total;
  j["offset"] = offset;
  j["limit"] = limit;
  j["prompts"] = std::move(list);
  return {200, j.dump()};
}

std::size_t InspectService::session_count() const {
  std::lock_guard lock(mu_);
  return lru_.size();
}

std::shared_ptr<const AnalysisSession> InspectService::find(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = index_.find(id);
  if (it == index_.end()) return nullptr;
  lru_.splice(lru_.begin(), lru_, it->second);
  return *it->second;
}

void InspectService::insert(std::shared_ptr<const AnalysisSession> s) {
  std::lock_guard lock(mu_);
  if (index_.count(s->id)) return;  // a concurrent request computed the same session
  lru_.push_front(std::move(s));
  index_[lru_.front()->id] = lru_.begin();
  while (lru_.size() > max_sessions_) {
    index_.erase(lru_.back()->id);
    lru_.pop_back();
  }
}

struct HttpFrontend::Impl {
  httplib::Server server;
};

HttpFrontend::HttpFrontend(InspectService& service, const std::string& static_dir) : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/api/model", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.model_info());
  });
  srv.Post("/api/analyze", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.analyze(req.body));
  });
  srv.Get("/api/attention", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.attention(req.get_param_value("session_id"), req.get_param_value("layer"),
                                req.get_param_value("head")));
  });
  srv.Get("/api/prompts", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.prompts(req.get_param_value("sub_task"), req.get_param_value("limit"),
                              req.get_param_value("offset")));
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", msg}}.dump(), "application/json");
  });
  if (!static_dir.empty()) {
    if (!std::filesystem::is_directory(static_dir) || !srv.set_mount_point("/", static_dir)) {
      throw IoError("static directory " + static_dir + " cannot be served");
    }
  }
}

HttpFrontend::~HttpFrontend() = default;

int HttpFrontend::bind(const std::string& host, int port) {
  int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpFrontend::listen() { impl_->server.listen_after_bind(); }

void HttpFrontend::stop() { impl_->server.stop(); }

void run_server(InspectService& service, const ServeOptions& options) {
  HttpFrontend front(service, options.static_dir);
  const int port = front.bind(options.host, options.port);
  std::fprintf(stderr, "serving on http://%s:%d\n", options.host.c_str(), port);
  front.listen();
}

}  // namespace parenlens
