#pragma once

#include "medit/denoiser.hpp"
#include "medit/edit.hpp"
#include "medit/synth.hpp"

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace medit {

struct JobRecord {
  std::string id;
  std::string kind;   // "pretrain" or "edit"
  std::string stage;  // session stage name
  int current = 0;
  int total = 0;
  std::optional<double> smoothed_loss;
  std::optional<std::string> error;
};

nlohmann::json to_json(const JobRecord& job);

/// Failure of a service request, mapped to an HTTP status by the server.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// Edit jobs over a loaded model. Jobs run one at a time on a worker thread;
/// status reads and generation on ready sessions may run concurrently.
class EditService {
 public:
  static constexpr int kProgressEvery = 10;
  static constexpr std::size_t kSmoothingWindow = 50;
  static constexpr std::size_t kMaxTracePoints = 500;

  EditService(DenoiserModel model, EmbeddingTable embeddings, CorpusSpec spec = {});
  ~EditService();

  EditService(const EditService&) = delete;
  EditService& operator=(const EditService&) = delete;

  nlohmann::json health() const;
  nlohmann::json list_motions() const;
  nlohmann::json world_positions(const std::string& motion_id) const;
  Motion motion(const std::string& motion_id) const;

  /// Validates synchronously (ServiceError 400 names the violated invariant),
  /// then queues the job and returns its id.
  std::string submit_edit(const nlohmann::json& request);

  JobRecord job(const std::string& job_id) const;
  nlohmann::json job_status(const std::string& job_id) const;

  /// Returns the id of the generated motion. 409 before the job is ready.
  std::string generate(const std::string& job_id, double eta, std::uint64_t seed);

  /// Blocks until the queue is empty and the worker is idle.
  void wait_idle();

 private:
  struct Job {
    JobRecord record;
    std::vector<double> stage1_trace;
    std::vector<double> stage2_trace;
    std::unique_ptr<EditSession> pending;
    std::shared_ptr<const EditSession> ready;
  };

  void worker_loop();
  void run_job(const std::string& id);

  DenoiserModel model_;
  EmbeddingTable embeddings_;
  NoiseSchedule schedule_;
  CorpusSpec spec_;

  mutable std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable idle_;
  std::map<std::string, Motion> motions_;
  std::vector<std::string> bundled_;
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  bool busy_ = false;
  bool stopping_ = false;
  std::uint64_t next_job_ = 1;
  std::thread worker_;
};

/// Parses an edit request body into a config (fields default when absent).
EditConfig edit_config_from_json(const nlohmann::json& request, InputKind kind);

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;
};

class HttpServer {
 public:
  HttpServer(EditService& service, ServeOptions options);
  ~HttpServer();

  /// Binds the port; false when it is unavailable.
  bool bind();
  int port() const;
  /// Serves until stop(); call after bind().
  void listen();
  /// Blocks until listen() has started accepting connections.
  void wait_until_ready() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace medit
