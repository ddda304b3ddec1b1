#pragma once

#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "parenlens/analysis.hpp"
#include "parenlens/dataset.hpp"

namespace parenlens {

struct HttpReply {
  int status = 200;
  std::string body;  // JSON
};

struct AnalysisSession {
  std::string id;
  std::string prompt;
  std::vector<TokenId> tokens;
  LensMode mode = LensMode::kFrozenFinalNorm;
  std::shared_ptr<const PromptAnalysis<float>> analysis;
  std::string response;  // the /api/analyze body, kept so repeats are identical
};

/// The server's logic, independent of any socket: each handler maps request
/// parameters to a status and JSON body. The model and dataset are immutable
/// after construction; only the bounded session store changes.
class InspectService {
 public:
  struct Loaded {
    ModelConfig config;
    ModelWeights<float> weights;
  };

  InspectService(std::optional<Loaded> model, std::vector<PromptRecord> dataset, std::size_t max_sessions = 64);

  HttpReply model_info() const;
  /// Body: {"prompt", "target"?, "counterfactual"?, "mode"?}.
  HttpReply analyze(const std::string& body);
  HttpReply attention(const std::string& session_id, const std::string& layer, const std::string& head);
  HttpReply prompts(const std::string& sub_task, const std::string& limit, const std::string& offset) const;

  std::size_t session_count() const;
  const Vocab& vocab() const { return vocab_; }

 private:
  std::shared_ptr<const AnalysisSession> find(const std::string& id);
  void insert(std::shared_ptr<const AnalysisSession> s);

  std::optional<Loaded> model_;
  std::vector<PromptRecord> dataset_;
  Vocab vocab_;
  std::size_t max_sessions_;

  mutable std::mutex mu_;
  std::list<std::shared_ptr<const AnalysisSession>> lru_;  // front = most recent
  std::unordered_map<std::string, std::list<std::shared_ptr<const AnalysisSession>>::iterator> index_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;  // mounted at "/" when non-empty
};

/// HTTP front end over an InspectService: JSON API under /api, CORS for any
/// origin, optional static files at "/".
class HttpFrontend {
 public:
  HttpFrontend(InspectService& service, const std::string& static_dir = {});
  ~HttpFrontend();
  HttpFrontend(const HttpFrontend&) = delete;
  HttpFrontend& operator=(const HttpFrontend&) = delete;

  /// Port 0 picks a free port. Returns the bound port; throws IoError.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// bind + listen. Throws IoError when the port cannot be bound.
void run_server(InspectService& service, const ServeOptions& options);

}  // namespace parenlens
