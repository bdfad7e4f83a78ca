#include "medit/service.hpp"

#include "medit/error.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace medit {

using nlohmann::json;

nlohmann::json to_json(const JobRecord& job) {
  json out = {{"id", job.id},
              {"kind", job.kind},
              {"stage", job.stage},
              {"progress", {{"current", job.current}, {"total", job.total}}},
              {"smoothed_loss", nullptr},
              {"error", nullptr}};
  if (job.smoothed_loss) out["smoothed_loss"] = *job.smoothed_loss;
  if (job.error) out["error"] = *job.error;
  return out;
}

namespace {

std::vector<double> decimate(const std::vector<double>& trace, std::size_t max_points) {
  if (trace.size() <= max_points) return trace;
  std::vector<double> out(max_points);
  for (std::size_t i = 0; i < max_points; ++i) out[i] = trace[i * trace.size() / max_points];
  return out;
}

double trailing_mean(const std::vector<double>& trace, std::size_t window) {
  const std::size_t n = std::min(window, trace.size());
  return std::accumulate(trace.end() - static_cast<std::ptrdiff_t>(n), trace.end(), 0.0) / static_cast<double>(n);
}

std::string format_eta(double eta) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", eta);
  return buf;
}

template <typename T>
T field_or(const json& body, const char* key, T fallback) {
  if (!body.contains(key) || body.at(key).is_null()) return fallback;
  return body.at(key).get<T>();
}

}  // namespace

EditConfig edit_config_from_json(const json& request, InputKind kind) {
  if (!request.is_object()) throw ServiceError(400, "request body must be an object");
  EditConfig c;
  try {
    c.input_kind = kind;
    c.scenario = parse_scenario(field_or<std::string>(request, "scenario", "local"));
    c.pose_steps = field_or<std::vector<int>>(request, "pose_steps", {});
    c.insert_at = field_or(request, "insert_at", c.insert_at);
    c.main_step = field_or(request, "main_step", c.pose_steps.empty() ? c.insert_at : c.pose_steps.front());
    c.pad = field_or(request, "pad", c.pad);
    c.v = field_or(request, "v", c.v);
    c.rho = field_or(request, "rho", c.rho);
    c.base_train_prob = field_or(request, "q", c.base_train_prob);
    c.eta = field_or(request, "eta", c.eta);
    c.iters_stage1 = field_or(request, "iters1", c.iters_stage1);
    c.iters_stage2 = field_or(request, "iters2", c.iters_stage2);
    c.lr_stage1 = field_or(request, "lr1", c.lr_stage1);
    c.lr_stage2 = field_or(request, "lr2", c.lr_stage2);
    c.seed = field_or<std::uint64_t>(request, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("malformed edit request: ") + e.what());
  } catch (const Error& e) {
    throw ServiceError(400, e.what());
  }
  return c;
}

EditService::EditService(DenoiserModel model, EmbeddingTable embeddings, CorpusSpec spec)
    : model_(std::move(model)),
      embeddings_(std::move(embeddings)),
      schedule_(schedule_for(model_)),
      spec_(std::move(spec)) {
  spec_.frames = model_.dims().frames;
  for (std::size_t l = 0; l < spec_.labels.size(); ++l) {
    const std::string& label = spec_.labels[l];
    if (!embeddings_.contains(label)) continue;
    const std::string id = "base-" + label;
    motions_.emplace(id, gen_motion(label, corpus_sample_seed(spec_.seed, l, 0), spec_));
    bundled_.push_back(id);
  }
  for (const auto& kind : kEditInputKinds) {
    const std::string id = "input-" + kind;
    motions_.emplace(id, gen_edit_inputs(kind, spec_));
    bundled_.push_back(id);
  }
  worker_ = std::thread([this] { worker_loop(); });
}

EditService::~EditService() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  wake_.notify_all();
  if (worker_.joinable()) worker_.join();
}

json EditService::health() const { return {{"status", "ok"}, {"version", MEDIT_VERSION}}; }

json EditService::list_motions() const {
  std::lock_guard lock(mutex_);
  json out = json::array();
  for (const auto& [id, m] : motions_) {
    const bool bundled = std::find(bundled_.begin(), bundled_.end(), id) != bundled_.end();
    out.push_back({{"id", id},
                   {"label", m.label().value_or("")},
                   {"frames", m.frame_count()},
                   {"fps", m.fps()},
                   {"kind", bundled ? (id.rfind("base-", 0) == 0 ? "base" : "input") : "generated"}});
  }
  return out;
}

Motion EditService::motion(const std::string& motion_id) const {
  std::lock_guard lock(mutex_);
  auto it = motions_.find(motion_id);
  if (it == motions_.end()) throw ServiceError(404, "unknown motion id '" + motion_id + "'");
  return it->second;
}

json EditService::world_positions(const std::string& motion_id) const {
  const Motion m = motion(motion_id);
  json frames = json::array();
  for (const WorldPose& pose : to_world_positions(m)) {
    json joints = json::array();
    for (Eigen::Index j = 0; j < pose.positions.rows(); ++j) {
      joints.push_back({pose.positions(j, 0), pose.positions(j, 1), pose.positions(j, 2)});
    }
    frames.push_back(std::move(joints));
  }
  return frames;
}

std::string EditService::submit_edit(const json& request) {
  if (!request.is_object()) throw ServiceError(400, "request body must be an object");
  const std::string base_id = field_or<std::string>(request, "base_id", "");
  const std::string input_id = field_or<std::string>(request, "input_id", "");
  const Motion base = motion(base_id);
  const Motion input = motion(input_id);
  const InputKind kind = input.frame_count() == 1 ? InputKind::StaticPose : InputKind::Clip;
  const EditConfig config = edit_config_from_json(request, kind);
  if (!base.label() || !embeddings_.contains(*base.label())) {
    throw ServiceError(400, "base motion '" + base_id + "' has no label known to the model");
  }
  std::unique_ptr<EditSession> session;
  try {
    session = std::make_unique<EditSession>(
        create_session(base, *base.label(), input, config, model_, embeddings_));
  } catch (const Error& e) {
    throw ServiceError(400, e.what());
  }

  std::string id;
  {
    std::lock_guard lock(mutex_);
    id = "job-" + std::to_string(next_job_++);
    Job job;
    job.record = JobRecord{id, "edit", std::string(to_string(Stage::Created)), 0,
                           config.iters_stage1 + config.iters_stage2, std::nullopt, std::nullopt};
    job.pending = std::move(session);
    jobs_.emplace(id, std::move(job));
    queue_.push_back(id);
  }
  wake_.notify_all();
  return id;
}

JobRecord EditService::job(const std::string& job_id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job id '" + job_id + "'");
  return it->second.record;
}

json EditService::job_status(const std::string& job_id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw ServiceError(404, "unknown job id '" + job_id + "'");
  json out = to_json(it->second.record);
  out["loss"] = {{"stage1", decimate(it->second.stage1_trace, kMaxTracePoints)},
                 {"stage2", decimate(it->second.stage2_trace, kMaxTracePoints)}};
  return out;
}

std::string EditService::generate(const std::string& job_id, double eta, std::uint64_t seed) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ServiceError(400, "eta must lie in [0, 1]");
  std::shared_ptr<const EditSession> session;
  {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) throw ServiceError(404, "unknown job id '" + job_id + "'");
    if (!it->second.ready) {
      throw ServiceError(409, "job '" + job_id + "' is not ready (stage " + it->second.record.stage + ")");
    }
    session = it->second.ready;
  }
  const std::string id = "gen-" + job_id + "-eta" + format_eta(eta) + "-seed" + std::to_string(seed);
  {
    std::lock_guard lock(mutex_);
    if (motions_.count(id)) return id;
  }
  Motion out = medit::generate(*session, eta, seed, schedule_);
  std::lock_guard lock(mutex_);
  motions_.emplace(id, std::move(out));
  return id;
}

void EditService::wait_idle() {
  std::unique_lock lock(mutex_);
  idle_.wait(lock, [this] { return queue_.empty() && !busy_; });
}

void EditService::worker_loop() {
  while (true) {
    std::string id;
    {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      busy_ = true;
    }
    run_job(id);
    {
      std::lock_guard lock(mutex_);
      busy_ = false;
    }
    idle_.notify_all();
  }
}

void EditService::run_job(const std::string& id) {
  std::unique_ptr<EditSession> session;
  {
    std::lock_guard lock(mutex_);
    session = std::move(jobs_.at(id).pending);
  }
  const int iters1 = session->config.iters_stage1;

  // Losses are buffered locally and published every kProgressEvery iterations.
  std::vector<double> buffer;
  auto publish = [&](int offset, std::vector<double> Job::*trace, int iteration, int total) {
    std::lock_guard lock(mutex_);
    Job& job = jobs_.at(id);
    std::vector<double>& dst = job.*trace;
    dst.insert(dst.end(), buffer.begin(), buffer.end());
    buffer.clear();
    job.record.stage = std::string(to_string(session->stage));
    job.record.current = offset + iteration;
    if (!dst.empty()) job.record.smoothed_loss = trailing_mean(dst, kSmoothingWindow);
    (void)total;
  };
  auto progress_for = [&](int offset, std::vector<double> Job::*trace) {
    return [&, offset, trace](int iteration, int total, double loss) {
      buffer.push_back(loss);
      if (iteration % kProgressEvery == 0 || iteration == total) publish(offset, trace, iteration, total);
    };
  };

  try {
    optimize_embedding(*session, schedule_, progress_for(0, &Job::stage1_trace));
    publish(0, &Job::stage1_trace, iters1, iters1);
    finetune_model(*session, schedule_, progress_for(iters1, &Job::stage2_trace));
    std::lock_guard lock(mutex_);
    Job& job = jobs_.at(id);
    job.record.stage = std::string(to_string(session->stage));
    job.record.current = job.record.total;
    job.ready = std::shared_ptr<const EditSession>(std::move(session));
  } catch (const std::exception& e) {
    std::lock_guard lock(mutex_);
    Job& job = jobs_.at(id);
    job.record.stage = std::string(to_string(Stage::Failed));
    job.record.error = e.what();
  }
}

struct HttpServer::Impl {
  Impl(EditService& svc, ServeOptions opts) : service(svc), options(std::move(opts)) {}

  EditService& service;
  ServeOptions options;
  httplib::Server server;
  int bound_port = -1;
};

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ServiceError& e) {
    reply(res, e.status(), {{"error", e.what()}});
  } catch (const json::exception& e) {
    reply(res, 400, {{"error", std::string("malformed request: ") + e.what()}});
  } catch (const Error& e) {
    reply(res, e.code() == ErrorCode::InvalidConfig ? 400 : 500, {{"error", e.what()}});
  } catch (const std::exception& e) {
    reply(res, 500, {{"error", e.what()}});
  }
}

}  // namespace

HttpServer::HttpServer(EditService& service, ServeOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  auto& svr = impl_->server;
  EditService& svc = impl_->service;
  // httplib's default adds SO_REUSEPORT, which lets a second server share a
  // busy port silently; keep only SO_REUSEADDR.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });

  svr.Get("/api/health", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, svc.health()); });
  });
  svr.Get("/api/motions", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, svc.list_motions()); });
  });
  svr.Get(R"(/api/motions/([^/]+)/world)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, svc.world_positions(req.matches[1])); });
  });
  svr.Post("/api/edits", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = json::parse(req.body);
      reply(res, 202, {{"job_id", svc.submit_edit(body)}});
    });
  });
  svr.Get(R"(/api/edits/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, svc.job_status(req.matches[1])); });
  });
  svr.Post(R"(/api/edits/([^/]+)/generate)", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("eta")) throw ServiceError(400, "missing query parameter eta");
      double eta = 0.0;
      std::uint64_t seed = 0;
      try {
        eta = std::stod(req.get_param_value("eta"));
        if (req.has_param("seed")) seed = std::stoull(req.get_param_value("seed"));
      } catch (const std::exception&) {
        throw ServiceError(400, "eta and seed must be numbers");
      }
      reply(res, 200, {{"motion_id", svc.generate(req.matches[1], eta, seed)}});
    });
  });
  if (!impl_->options.static_dir.empty()) svr.set_mount_point("/", impl_->options.static_dir);
}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::bind() {
  if (impl_->options.port == 0) {
    impl_->bound_port = impl_->server.bind_to_any_port(impl_->options.host);
    return impl_->bound_port > 0;
  }
  if (!impl_->server.bind_to_port(impl_->options.host, impl_->options.port)) return false;
  impl_->bound_port = impl_->options.port;
  return true;
}

int HttpServer::port() const { return impl_->bound_port; }

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

void HttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace medit
