#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilab/analytics.hpp"
#include "hilab/workspace.hpp"

#include <httplib.h>

namespace hilab {

namespace api {

using json = nlohmann::json;

inline json opt(const std::optional<std::string>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const PredictionRecord& p, const std::vector<std::string>& classes) {
  json probs = json::object();
  for (std::size_t i = 0; i < p.probs.size() && i < classes.size(); ++i) probs[classes[i]] = p.probs[i];
  return {{"node", p.node},       {"model_version", p.model_version}, {"predicted_class", p.predicted_class},
          {"probs", probs},       {"entropy", p.entropy},             {"margin", p.margin},
          {"confident", p.confident}};
}

inline json taxonomy_json(const Workspace& ws) {
  const auto& tax = ws.taxonomy();
  json nodes = json::array();
  for (const auto& n : tax.nodes()) {
    const auto& id = n.id;
    json j = {{"id", id},
              {"display_name", n.display_name},
              {"parent", opt(n.parent)},
              {"children", n.children},
              {"path", tax.path_of(id).str()},
              {"trainable", n.trainable()},
              {"classifier", nullptr}};
    if (auto m = ws.model(id)) {
      json f1 = json::object();
      for (std::size_t c = 0; c < m->classes.size() && c < m->per_class_f1.size(); ++c) {
        f1[m->classes[c]] = m->per_class_f1[c];
      }
      j["classifier"] = {{"model_version", m->version},
                         {"macro_f1", m->macro_f1},
                         {"per_class_f1", f1},
                         {"trained_on", m->trained_on},
                         {"feature_kind", to_string(m->feature_kind)}};
    }
    nodes.push_back(std::move(j));
  }
  return {{"root", tax.root()}, {"nodes", nodes}};
}

inline json to_json(const analytics::NodeSummary& s) {
  json classes = json::array();
  for (const auto& c : s.classes) {
    classes.push_back({{"class", c.cls},
                       {"ground_truth_count", c.ground_truth},
                       {"pseudo_count", c.pseudo},
                       {"fraction", c.fraction}});
  }
  json children = json::array();
  for (const auto& c : s.children) children.push_back(to_json(c));
  return {{"node", s.node},
          {"display_name", s.display_name},
          {"total", s.total},
          {"classes", classes},
          {"children", children}};
}

inline json to_json(const analytics::FilterSummary& f) {
  json hist = json::object();
  for (const auto& [cls, h] : f.histograms) {
    json bins = json::array();
    for (std::size_t b = 0; b < analytics::kProbabilityBins; ++b) {
      bins.push_back({{"lower", static_cast<double>(b) / analytics::kProbabilityBins},
                      {"upper", static_cast<double>(b + 1) / analytics::kProbabilityBins},
                      {"labeled_count", h.labeled[b]},
                      {"unlabeled_count", h.unlabeled[b]},
                      {"labeled_height", h.labeled_height(b)},
                      {"unlabeled_height", h.unlabeled_height(b)}});
    }
    hist[cls] = bins;
  }
  return {{"total", f.total},
          {"label_bars", f.label_bars},
          {"prediction_bars", f.prediction_bars},
          {"source_bars", f.source_bars},
          {"histograms", hist}};
}

inline json to_json(const analytics::GalleryPage& g) {
  json items = json::array();
  for (const auto& i : g.items) {
    items.push_back({{"image_id", i.image_id},
                     {"label_class", opt(i.label_class)},
                     {"label_kind", to_string(i.label_kind)},
                     {"predicted_class", opt(i.predicted_class)},
                     {"top_probability", i.top_probability},
                     {"margin", i.margin},
                     {"marked_deleted", i.marked_deleted}});
  }
  return {{"tab", to_string(g.tab)},
          {"total", g.total},
          {"page", g.page},
          {"page_size", g.page_size},
          {"items", items}};
}

inline json to_json(const std::vector<analytics::SankeyFlow>& flows) {
  json out = json::array();
  for (const auto& f : flows) {
    out.push_back({{"from", f.from}, {"to", f.to}, {"count", f.count}, {"rollup", f.rollup}});
  }
  return out;
}

inline json to_json(const ALReport& r) {
  return {{"node", r.node},
          {"scored", r.scored},
          {"promoted", r.promoted},
          {"revoked", r.revoked},
          {"confident_count", r.confident_count},
          {"uncertain_count", r.uncertain_count},
          {"pool_changes", r.pool_changes},
          {"retrained", r.retrained},
          {"model_version", r.model_version ? json(*r.model_version) : json(nullptr)},
          {"new_macro_f1", r.new_macro_f1 ? json(*r.new_macro_f1) : json(nullptr)},
          {"top_uncertain", r.top_uncertain},
          {"notices", r.notices}};
}

inline json to_json(const TrainOutcome& t) {
  const auto& m = t.result.model;
  json f1 = json::object();
  for (std::size_t c = 0; c < m.classes.size() && c < m.per_class_f1.size(); ++c) f1[m.classes[c]] = m.per_class_f1[c];
  json out = {{"node", m.node},
              {"model_version", m.version},
              {"macro_f1", m.macro_f1},
              {"per_class_f1", f1},
              {"trained_on", m.trained_on},
              {"pool_size", t.pool_size},
              {"epochs_run", t.result.epochs_run},
              {"best_epoch", t.result.best_epoch},
              {"best_val_macro_f1", t.result.best_val_macro_f1}};
  if (t.result.test_metrics) out["confusion"] = t.result.test_metrics->confusion;
  return out;
}

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::unknown_image:
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict:
    case ErrorCode::unavailable: return 409;
    case ErrorCode::training_refused: return 422;
    case ErrorCode::io_error: return 500;
    default: return 400;
  }
}

inline json error_body(ErrorCode code, const std::string& message) {
  return {{"error", {{"code", to_string(code)}, {"message", message}}}};
}

}  // namespace api

// ---------------------------------------------------------------------------
// Background jobs

enum class JobState { queued, running, done, failed };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "queued";
}

struct JobStatus {
  std::string job_id;
  std::string kind;  // train | project | al_step
  NodeId node;
  JobState state = JobState::queued;
  double progress = 0.0;
  std::string result_ref;
  nlohmann::json result;
  std::string error;

  nlohmann::json to_json() const {
    return {{"job_id", job_id},     {"kind", kind},
            {"node", node},         {"state", to_string(state)},
            {"progress", progress}, {"result_ref", result_ref.empty() ? nlohmann::json(nullptr) : nlohmann::json(result_ref)},
            {"result", result},     {"error", error.empty() ? nlohmann::json(nullptr) : nlohmann::json(error)}};
  }
};

/// Worker pool with at most one live job per (kind, node). Submitting while
/// such a job is queued or running returns its id.
class JobManager {
 public:
  using Task = std::function<nlohmann::json()>;

  explicit JobManager(std::size_t workers = 1) {
    for (std::size_t i = 0; i < std::max<std::size_t>(1, workers); ++i) {
      threads_.emplace_back([this] { run(); });
    }
  }

  ~JobManager() { shutdown(); }

  JobManager(const JobManager&) = delete;
  JobManager& operator=(const JobManager&) = delete;

  std::string submit(const std::string& kind, const NodeId& node, Task task, std::string result_ref = {}) {
    std::lock_guard lock(mutex_);
    const auto key = kind + '\n' + node;
    if (auto it = active_.find(key); it != active_.end()) return it->second;
    JobStatus s;
    s.job_id = "job-" + std::to_string(++counter_);
    s.kind = kind;
    s.node = node;
    s.result_ref = std::move(result_ref);
    jobs_[s.job_id] = s;
    active_[key] = s.job_id;
    queue_.push_back({s.job_id, key, std::move(task)});
    cv_.notify_one();
    return s.job_id;
  }

  std::optional<JobStatus> get(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(id);
    return it == jobs_.end() ? std::nullopt : std::optional(it->second);
  }

  /// Blocks until `id` reaches done or failed.
  JobStatus wait(const std::string& id) const {
    std::unique_lock lock(mutex_);
    finished_cv_.wait(lock, [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second.state == JobState::done || it->second.state == JobState::failed;
    });
    return jobs_.at(id);
  }

  void shutdown() {
    {
      std::lock_guard lock(mutex_);
      if (stopping_) return;
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

 private:
  struct Pending {
    std::string id;
    std::string key;
    Task task;
  };

  void run() {
    for (;;) {
      Pending job;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        job = std::move(queue_.front());
        queue_.pop_front();
        jobs_[job.id].state = JobState::running;
      }
      nlohmann::json result;
      std::string error;
      bool ok = true;
      try {
        result = job.task();
      } catch (const Error& e) {
        ok = false;
        error = std::string(to_string(e.code())) + ": " + e.what();
      } catch (const std::exception& e) {
        ok = false;
        error = e.what();
      }
      {
        std::lock_guard lock(mutex_);
        auto& s = jobs_[job.id];
        s.state = ok ? JobState::done : JobState::failed;
        s.progress = 1.0;
        if (ok) {
          s.result = std::move(result);
          if (s.result_ref.empty()) s.result_ref = "/jobs/" + job.id;
        } else {
          s.error = std::move(error);
        }
        active_.erase(job.key);
      }
      finished_cv_.notify_all();
    }
  }

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  mutable std::condition_variable finished_cv_;
  std::deque<Pending> queue_;
  std::map<std::string, JobStatus> jobs_;
  std::map<std::string, std::string> active_;
  std::vector<std::thread> threads_;
  std::uint64_t counter_ = 0;
  bool stopping_ = false;
};

// ---------------------------------------------------------------------------

inline const char* kSessionHeader = "X-Session-Id";
inline const char* kRequestTokenHeader = "X-Request-Token";

/// HTTP facade over a Workspace. Reads hold a shared lock and mutations an
/// exclusive one, so every response reflects a single consistent state.
class Server {
 public:
  explicit Server(Workspace& ws, std::size_t workers = 1) : ws_(ws), jobs_(workers) { routes(); }

  ~Server() { stop(); }

  /// Blocks serving on host:port until stop().
  bool listen(const std::string& host, int port) { return http_.listen(host, port); }

  /// Binds an ephemeral port and serves on a background thread.
  int start_background(const std::string& host = "127.0.0.1") {
    int port = http_.bind_to_any_port(host);
    if (port < 0) throw Error(ErrorCode::io_error, "cannot bind " + host);
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return port;
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    http_.stop();
    if (thread_.joinable()) thread_.join();
    jobs_.shutdown();
    ws_.store().compact();
  }

  JobManager& jobs() { return jobs_; }
  httplib::Server& http() { return http_; }

 private:
  using Req = httplib::Request;
  using Res = httplib::Response;
  using json = nlohmann::json;

  static void reply(Res& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  auto guarded(F&& f) {
    return [this, f = std::forward<F>(f)](const Req& req, Res& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        reply(res, api::http_status(e.code()), api::error_body(e.code(), e.what()));
      } catch (const json::exception& e) {
        reply(res, 400, api::error_body(ErrorCode::invalid_argument, std::string("malformed JSON: ") + e.what()));
      } catch (const std::exception& e) {
        reply(res, 500, api::error_body(ErrorCode::io_error, e.what()));
      }
    };
  }

  /// Replays the stored response when the request token was seen before.
  template <typename F>
  auto idempotent(F&& f) {
    return guarded([this, f = std::forward<F>(f)](const Req& req, Res& res) {
      const auto token = req.get_header_value(kRequestTokenHeader);
      if (!token.empty()) {
        std::lock_guard lock(token_mutex_);
        auto key = req.path + '\n' + token;
        if (auto it = tokens_.find(key); it != tokens_.end()) {
          res.status = it->second.first;
          res.set_content(it->second.second, "application/json");
          return;
        }
        f(req, res);
        remember(key, res.status, res.body);
        return;
      }
      f(req, res);
    });
  }

  void remember(const std::string& key, int status, const std::string& body) {
    tokens_[key] = {status, body};
    token_order_.push_back(key);
    while (token_order_.size() > 4096) {
      tokens_.erase(token_order_.front());
      token_order_.pop_front();
    }
  }

  static std::string param(const Req& req, const char* name, const std::string& fallback = {}) {
    return req.has_param(name) ? req.get_param_value(name) : fallback;
  }

  static std::size_t size_param(const Req& req, const char* name, std::size_t fallback) {
    if (!req.has_param(name)) return fallback;
    try {
      return std::stoul(req.get_param_value(name));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::invalid_argument, std::string("bad integer for '") + name + "'");
    }
  }

  static double double_param(const Req& req, const char* name, double fallback) {
    if (!req.has_param(name)) return fallback;
    try {
      return std::stod(req.get_param_value(name));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::invalid_argument, std::string("bad number for '") + name + "'");
    }
  }

  static std::set<std::string> list_param(const Req& req, const char* name) {
    std::set<std::string> out;
    if (!req.has_param(name)) return out;
    for (auto& s : detail::split(req.get_param_value(name), ',')) {
      if (!s.empty()) out.insert(s);
    }
    return out;
  }

  NodeId node_param(const Req& req) const {
    auto node = param(req, "node", ws_.taxonomy().root());
    if (!ws_.taxonomy().contains(node)) throw Error(ErrorCode::not_found, "unknown node '" + node + "'");
    return node;
  }

  static std::string session_of(const Req& req, bool required) {
    auto s = req.get_header_value(kSessionHeader);
    if (s.empty() && req.has_param("session")) s = req.get_param_value("session");
    if (s == kSystemSession) throw Error(ErrorCode::invalid_argument, "session id '" + s + "' is reserved");
    if (s.empty() && required) throw Error(ErrorCode::invalid_argument, "missing X-Session-Id header");
    return s;
  }

  ProjectionKey projection_key(const Req& req) const {
    return ws_.projection_key(node_param(req), parse_subset(param(req, "subset", "all")),
                              parse_projection_method(param(req, "method", "pca")),
                              static_cast<std::uint64_t>(size_param(req, "seed", 0)));
  }

  json projection_json(const ProjectionSet& set, const ProjectionKey& key) const {
    const auto preds = ws_.store().predictions(set.node);
    json points = json::array();
    for (const auto& p : set.points) {
      json label = nullptr;
      if (auto r = ws_.store().get(p.image_id); r && r->is_ground_truth() && r->label) {
        label = api::opt(ws_.taxonomy().class_of(*r->label, set.node));
      }
      auto it = preds.find(p.image_id);
      points.push_back({{"image_id", p.image_id},
                        {"x", p.x},
                        {"y", p.y},
                        {"neighborhood_hit", p.neighborhood_hit},
                        {"label_class", label},
                        {"predicted_class", it == preds.end() ? json(nullptr) : json(it->second.predicted_class)}});
    }
    return {{"node", set.node},
            {"subset", to_string(set.subset)},
            {"method", to_string(set.method)},
            {"seed", set.seed},
            {"key", key.hex()},
            {"nh_k", ws_.options().nh_k},
            {"nh_threshold", ws_.options().nh_threshold},
            {"points", points},
            {"warnings", set.warnings}};
  }

  void routes() {
    http_.Get("/taxonomy", guarded([this](const Req&, Res& res) {
      std::shared_lock lock(state_);
      reply(res, 200, api::taxonomy_json(ws_));
    }));

    http_.Get("/summary", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      auto node = node_param(req);
      reply(res, 200, api::to_json(analytics::dataset_summary(ws_.taxonomy(), ws_.store().records(), node)));
    }));

    http_.Get("/projection", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      const auto key = projection_key(req);
      if (auto set = ws_.cached_projection(key)) {
        reply(res, 200, projection_json(*set, key));
        return;
      }
      auto id = jobs_.submit("project", key.node, [this, key]() -> json {
        std::shared_lock job_lock(state_);
        auto set = ws_.project(key.node, key.subset, key.method, key.seed);
        return {{"points", set.points.size()}, {"key", key.hex()}};
      }, "/projection?node=" + key.node + "&subset=" + to_string(key.subset) + "&method=" +
             to_string(key.method) + "&seed=" + std::to_string(key.seed));
      reply(res, 202, {{"job_id", id}, {"state", to_string(jobs_.get(id)->state)}});
    }));

    http_.Get("/filters", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      QueryFilter f;
      f.node = node_param(req);
      if (req.has_param("subset")) f.subset = parse_subset(req.get_param_value("subset"));
      f.label_classes = list_param(req, "label");
      f.predicted_classes = list_param(req, "predicted");
      f.sources = list_param(req, "source");
      if (req.has_param("pmin") || req.has_param("pmax")) {
        f.probability = {double_param(req, "pmin", 0.0), double_param(req, "pmax", 1.0)};
      }
      f.deleted = param(req, "deleted") == "true";
      reply(res, 200, api::to_json(analytics::filter_summary(ws_.taxonomy(), ws_.store(), f)));
    }));

    http_.Get("/gallery", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      auto node = node_param(req);
      auto tab = analytics::parse_gallery_tab(param(req, "tab", "mispredicted"));
      std::optional<std::vector<ImageId>> selection;
      if (tab == analytics::GalleryTab::selected) {
        auto session = session_of(req, false);
        std::lock_guard sel_lock(selection_mutex_);
        if (auto it = selections_.find(session); it != selections_.end()) selection = it->second;
      }
      auto page = analytics::gallery(ws_.taxonomy(), ws_.store(), node, tab, selection ? &*selection : nullptr,
                                     size_param(req, "page", 0), size_param(req, "page_size", 50));
      reply(res, 200, api::to_json(page));
    }));

    http_.Get(R"(/images/([^/]+))", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      const std::string id = req.matches[1];
      auto r = ws_.store().get(id);
      if (!r) throw Error(ErrorCode::unknown_image, "unknown image '" + id + "'");
      json preds = json::object();
      for (const auto& node : ws_.taxonomy().classifier_nodes()) {
        if (auto p = ws_.store().prediction(node, id)) preds[node] = api::to_json(*p, ws_.taxonomy().node(node).children);
      }
      auto body = to_json(*r);
      body["predictions"] = preds;
      body["has_features"] = ws_.features(id).has_value();
      reply(res, 200, body);
    }));

    http_.Get(R"(/images/([^/]+)/neighborhood)", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      const std::string id = req.matches[1];
      if (!ws_.store().get(id)) throw Error(ErrorCode::unknown_image, "unknown image '" + id + "'");
      const auto key = projection_key(req);
      const auto preset = layout::parse_preset(param(req, "preset", "small"));
      const auto kind = parse_layout_kind(param(req, "layout", "spiral"));
      auto nb = ws_.neighborhood(id, key, preset, kind);
      const auto& classes = ws_.taxonomy().node(key.node).children;
      json boxes = json::array();
      for (std::size_t i = 0; i < nb.layout.boxes.size(); ++i) {
        const auto& b = nb.layout.boxes[i];
        const auto& d = nb.details[i];
        boxes.push_back({{"image_id", b.image_id},
                         {"x", b.rect.x},
                         {"y", b.rect.y},
                         {"w", b.rect.w},
                         {"h", b.rect.h},
                         {"ring", b.ring},
                         {"quadrant", b.quadrant == layout::Quadrant::none ? json(nullptr) : json(layout::to_string(b.quadrant))},
                         {"subdivided", b.subdivided},
                         {"label", api::opt(d.label)},
                         {"label_kind", to_string(d.label_kind)},
                         {"class_mark", api::opt(d.class_mark)},
                         {"caption", api::opt(d.caption)},
                         {"source", d.source},
                         {"marked_deleted", d.deleted},
                         {"prediction", d.prediction ? api::to_json(*d.prediction, classes) : json(nullptr)}});
      }
      reply(res, 200, {{"center", id},
                       {"preset", layout::to_string(preset)},
                       {"layout", to_string(kind)},
                       {"capacity", layout::total_capacity(preset)},
                       {"boxes", boxes},
                       {"notices", nb.layout.notices}});
    }));

    http_.Get(R"(/images/([^/]+)/saliency)", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      const std::string id = req.matches[1];
      auto node = node_param(req);
      std::optional<std::string> cls;
      if (req.has_param("class")) cls = req.get_param_value("class");
      auto h = ws_.saliency(id, node, cls);
      json body = {{"image_id", id}, {"node", node}, {"width", h.width}, {"height", h.height},
                   {"grid_side", kGridSide}, {"grid", h.grid}};
      if (param(req, "full") == "1") body["values"] = h.values;
      reply(res, 200, body);
    }));

    http_.Get("/updates/sankey", guarded([this](const Req& req, Res& res) {
      std::shared_lock lock(state_);
      auto session = session_of(req, true);
      reply(res, 200, {{"session", session}, {"flows", api::to_json(analytics::sankey(ws_.store().session_events(session)))}});
    }));

    http_.Get(R"(/jobs/([^/]+))", guarded([this](const Req& req, Res& res) {
      auto s = jobs_.get(req.matches[1]);
      if (!s) throw Error(ErrorCode::not_found, "unknown job '" + std::string(req.matches[1]) + "'");
      reply(res, 200, s->to_json());
    }));

    http_.Post("/updates", idempotent([this](const Req& req, Res& res) {
      auto session = session_of(req, true);
      auto body = json::parse(req.body);
      std::vector<UpdateEvent> events;
      for (const auto& u : body.at("updates")) {
        UpdateEvent e;
        e.session_id = session;
        e.image_id = u.at("image_id").get<std::string>();
        e.action = parse_update_action(u.at("action").get<std::string>());
        if (e.action != UpdateAction::relabel && e.action != UpdateAction::remove &&
            e.action != UpdateAction::restore) {
          throw Error(ErrorCode::invalid_argument, "action '" + std::string(to_string(e.action)) + "' is not allowed");
        }
        if (u.contains("label") && !u["label"].is_null()) e.new_label = LabelPath::parse(u["label"].get<std::string>());
        events.push_back(std::move(e));
      }
      std::unique_lock lock(state_);
      std::vector<std::string> ids;
      for (const auto& e : events) ids.push_back(e.image_id);
      auto results = ws_.store().apply_batch(std::move(events));
      json out = json::array();
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        const bool failed = r.noop && !r.event && r.record.id.empty();
        json item = {{"image_id", ids[i]}, {"ok", !failed}, {"noop", r.noop && !failed}};
        if (failed) {
          item["error"] = r.notice;
        } else {
          item["record"] = to_json(r.record);
          if (!r.notice.empty()) item["notice"] = r.notice;
          if (r.event) item["seq"] = r.event->seq;
        }
        out.push_back(std::move(item));
      }
      reply(res, 200, {{"session", session},
                       {"results", out},
                       {"sankey", api::to_json(analytics::sankey(ws_.store().session_events(session)))}});
    }));

    http_.Post("/train", idempotent([this](const Req& req, Res& res) {
      auto node = node_param(req);
      if (!ws_.taxonomy().node(node).trainable()) {
        throw Error(ErrorCode::training_refused, "node '" + node + "' is not trainable");
      }
      auto id = jobs_.submit("train", node, [this, node]() -> json {
        std::shared_lock lock(state_);
        return api::to_json(ws_.train(node));
      });
      reply(res, 202, {{"job_id", id}});
    }));

    http_.Post("/al/step", idempotent([this](const Req& req, Res& res) {
      auto node = node_param(req);
      if (!ws_.taxonomy().node(node).trainable()) {
        throw Error(ErrorCode::training_refused, "node '" + node + "' is not trainable");
      }
      auto id = jobs_.submit("al_step", node, [this, node]() -> json {
        std::unique_lock lock(state_);
        return api::to_json(ws_.al_step(node));
      });
      reply(res, 202, {{"job_id", id}});
    }));

    http_.Post("/selection", idempotent([this](const Req& req, Res& res) {
      auto session = session_of(req, true);
      auto body = json::parse(req.body.empty() ? "{}" : req.body);
      std::vector<ImageId> ids;
      if (body.contains("rect")) {
        std::shared_lock lock(state_);
        const auto key = ws_.projection_key(body.value("node", ws_.taxonomy().root()),
                                            parse_subset(body.value("subset", "all")),
                                            parse_projection_method(body.value("method", "pca")),
                                            body.value("seed", std::uint64_t{0}));
        auto set = ws_.cached_projection(key);
        if (!set) throw Error(ErrorCode::conflict, "projection not cached; refresh the projection first");
        const auto& r = body.at("rect");
        ids = analytics::brush(*set, r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(),
                               r.at(3).get<double>());
      } else {
        ids = body.at("ids").get<std::vector<ImageId>>();
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
      }
      {
        std::lock_guard lock(selection_mutex_);
        selections_[session] = ids;
      }
      reply(res, 200, {{"session", session}, {"count", ids.size()}, {"ids", ids}});
    }));
  }

  Workspace& ws_;
  JobManager jobs_;
  httplib::Server http_;
  std::thread thread_;
  std::atomic<bool> stopped_{false};
  mutable std::shared_mutex state_;
  std::mutex token_mutex_;
  std::map<std::string, std::pair<int, std::string>> tokens_;
  std::deque<std::string> token_order_;
  std::mutex selection_mutex_;
  std::map<std::string, std::vector<ImageId>> selections_;
};

}  // namespace hilab
