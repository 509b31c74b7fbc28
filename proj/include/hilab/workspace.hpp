#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilab/al.hpp"
#include "hilab/classifier.hpp"
#include "hilab/config.hpp"
#include "hilab/features.hpp"
#include "hilab/layout.hpp"
#include "hilab/projection.hpp"
#include "hilab/splits.hpp"
#include "hilab/store.hpp"
#include "hilab/taxonomy.hpp"

namespace hilab {

struct WorkspaceOptions {
  ALConfig al;
  TrainConfig train;
  SplitRatios ratios;
  double perplexity = 30.0;
  std::size_t tsne_iterations = 1000;
  std::size_t nh_k = 6;
  double nh_threshold = 0.5;

  static WorkspaceOptions from_config(const Config& c) {
    WorkspaceOptions o;
    o.al.delta = c.delta;
    o.al.retrain_increment = c.retrain_increment;
    o.train.learning_rate = c.learning_rate;
    o.train.max_epochs = c.max_epochs;
    o.train.patience = c.patience;
    o.train.seed = c.seed;
    o.perplexity = c.perplexity;
    o.nh_k = c.nh_k;
    o.nh_threshold = c.nh_threshold;
    return o;
  }
};

using Trainer = std::function<TrainResult(const NodeId&, const std::vector<std::string>&, const LabeledSet&,
                                          const LabeledSet&, const LabeledSet&, const TrainConfig&, FeatureKind)>;

enum class LayoutKind { spiral, spatial, grid };

inline LayoutKind parse_layout_kind(std::string_view s) {
  if (s == "spiral") return LayoutKind::spiral;
  if (s == "spatial") return LayoutKind::spatial;
  if (s == "grid") return LayoutKind::grid;
  throw Error(ErrorCode::invalid_argument, "unknown layout '" + std::string(s) + "'");
}

inline const char* to_string(LayoutKind k) {
  switch (k) {
    case LayoutKind::spiral: return "spiral";
    case LayoutKind::spatial: return "spatial";
    case LayoutKind::grid: return "grid";
  }
  return "spiral";
}

struct BoxDetails {
  ImageId image_id;
  std::optional<std::string> label;
  LabelKind label_kind = LabelKind::none;
  std::optional<std::string> class_mark;  // class at the projected node
  std::optional<std::string> caption;
  std::string source;
  bool deleted = false;
  std::optional<PredictionRecord> prediction;
};

struct Neighborhood {
  layout::LayoutResult layout;
  std::vector<BoxDetails> details;  // parallel to layout.boxes
};

struct TrainOutcome {
  TrainResult result;
  std::size_t pool_size = 0;
};

/// The labeling engine: one store, one feature table, a model per classifier
/// node and the projection cache, optionally persisted under one directory.
///
///   <dir>/snapshot.jsonl, events.jsonl   store
///   <dir>/features.bin, features.kind     feature matrix
///   <dir>/models/<node>.model, .pool      classifier and its pool at last train
///   <dir>/predictions.jsonl               latest inference per node
///   <dir>/projections/<key>.bin           projection cache
class Workspace {
 public:
  Workspace(Taxonomy taxonomy, WorkspaceOptions options = {}, std::filesystem::path dir = {})
      : taxonomy_(std::move(taxonomy)), options_(options), dir_(std::move(dir)) {
    options_.al.validate();
    if (dir_.empty()) {
      store_ = std::make_unique<Store>(taxonomy_);
    } else {
      store_ = Store::open(taxonomy_, dir_);
      load_derived();
    }
    trainer_ = [](const NodeId& node, const std::vector<std::string>& classes, const LabeledSet& train,
                  const LabeledSet& val, const LabeledSet& test, const TrainConfig& config, FeatureKind kind) {
      return train_softmax(node, classes, train, val, test, config, kind);
    };
  }

  static std::unique_ptr<Workspace> open(const Config& config) {
    return std::make_unique<Workspace>(Taxonomy::load(config.taxonomy_path.string()),
                                       WorkspaceOptions::from_config(config), config.store_path);
  }

  const Taxonomy& taxonomy() const { return taxonomy_; }
  Store& store() { return *store_; }
  const Store& store() const { return *store_; }
  const WorkspaceOptions& options() const { return options_; }
  WorkspaceOptions& options() { return options_; }
  const std::filesystem::path& dir() const { return dir_; }

  void set_trainer(Trainer trainer) { trainer_ = std::move(trainer); }

  // -------------------------------------------------------------------------
  // Ingestion and features

  IngestReport ingest(const std::vector<ManifestRow>& rows) { return store_->ingest(rows); }

  /// Decodes every live record's image (uri relative to `image_root`) and
  /// attaches builtin features. Replaces any existing feature table.
  MatrixIngestReport extract_features(const std::filesystem::path& image_root) {
    FeatureTable table;
    MatrixIngestReport report;
    for (const auto& r : store_->records()) {
      if (r.deleted) continue;
      std::filesystem::path p(r.uri);
      if (p.is_relative()) p = image_root / p;
      try {
        auto img = decode_image(read_file_bytes(p));
        table.attach(r.id, extract(img), FeatureKind::builtin);
        store_->set_dimensions(r.id, img.width, img.height);
        ++report.count;
      } catch (const Error& e) {
        report.rejected.push_back(r.id + ": " + e.what());
      }
    }
    store_->compact();
    std::unique_lock lock(mutex_);
    features_ = std::move(table);
    save_features_locked();
    return report;
  }

  MatrixIngestReport import_features(std::span<const std::uint8_t> bytes) {
    std::unique_lock lock(mutex_);
    auto report = ingest_matrix(features_, bytes, [this](const std::string& id) { return store_->get(id).has_value(); });
    save_features_locked();
    return report;
  }

  void attach_features(const ImageId& id, std::vector<double> values, FeatureKind kind) {
    std::unique_lock lock(mutex_);
    features_.attach(id, std::move(values), kind);
    save_features_locked();
  }

  std::optional<std::vector<double>> features(const ImageId& id) const {
    std::shared_lock lock(mutex_);
    auto* v = features_.find(id);
    return v ? std::optional(*v) : std::nullopt;
  }

  std::size_t feature_count() const {
    std::shared_lock lock(mutex_);
    return features_.size();
  }

  // -------------------------------------------------------------------------
  // Splits

  /// Assigns train/val/test to every live ground-truth record and logs the
  /// changes as system events.
  SplitResult split(std::uint64_t seed) {
    auto result = assign_splits(store_->records(), options_.ratios, seed);
    std::vector<UpdateEvent> events;
    for (const auto& a : result.assignments) {
      UpdateEvent e;
      e.session_id = kSystemSession;
      e.image_id = a.image_id;
      e.action = UpdateAction::assign_split;
      e.new_split = a.split;
      events.push_back(std::move(e));
    }
    for (const auto& r : store_->apply_batch(std::move(events))) {
      if (r.noop && !r.notice.empty()) result.warnings.push_back(r.notice);
    }
    return result;
  }

  std::vector<SplitViolation> verify_splits() const {
    auto records = store_->records();
    return verify_consistency(taxonomy_, records, assignments_from_records(records), options_.ratios);
  }

  // -------------------------------------------------------------------------
  // Training

  /// Live records supplying a class at `node` that are ground truth in the
  /// train split or pseudo-labeled.
  TrainingPool training_pool(const NodeId& node) const {
    TrainingPool pool;
    for (const auto& r : store_->records()) {
      if (r.deleted || !r.label) continue;
      auto cls = taxonomy_.class_of(*r.label, node);
      if (!cls) continue;
      const bool usable = (r.is_ground_truth() && r.split == Split::train) || r.label_kind == LabelKind::pseudo;
      if (usable) pool[r.id] = *cls;
    }
    return pool;
  }

  TrainOutcome train(const NodeId& node) {
    const auto& n = taxonomy_.node(node);
    if (!n.trainable()) {
      throw Error(ErrorCode::training_refused, "node '" + node + "' has fewer than two children");
    }
    auto pool = training_pool(node);
    LabeledSet train_set, val_set, test_set;
    FeatureKind kind;
    std::uint32_t previous = 0;
    {
      std::shared_lock lock(mutex_);
      kind = features_.kind();
      std::vector<std::string> missing;
      for (const auto& [id, cls] : pool) {
        auto* x = features_.find(id);
        if (!x) {
          missing.push_back(id);
          continue;
        }
        train_set.add(id, *x, *taxonomy_.class_index(node, cls));
      }
      for (const auto& r : store_->records()) {
        if (r.deleted || !r.is_ground_truth() || !r.label) continue;
        if (r.split != Split::val && r.split != Split::test) continue;
        auto cls = taxonomy_.class_of(*r.label, node);
        if (!cls) continue;
        auto* x = features_.find(r.id);
        if (!x) {
          missing.push_back(r.id);
          continue;
        }
        (r.split == Split::val ? val_set : test_set).add(r.id, *x, *taxonomy_.class_index(node, *cls));
      }
      if (!missing.empty()) {
        throw Error(ErrorCode::training_refused, std::to_string(missing.size()) +
                                                     " pooled image(s) lack features, first '" + missing.front() +
                                                     "'");
      }
      if (auto it = models_.find(node); it != models_.end()) previous = it->second.version;
    }
    TrainOutcome out;
    out.pool_size = pool.size();
    out.result = trainer_(node, n.children, train_set, val_set, test_set, options_.train, kind);
    out.result.model.version = previous + 1;
    {
      std::unique_lock lock(mutex_);
      models_[node] = out.result.model;
      pools_[node] = std::move(pool);
      save_model_locked(node);
    }
    infer_node(node);
    return out;
  }

  std::optional<Model> model(const NodeId& node) const {
    std::shared_lock lock(mutex_);
    auto it = models_.find(node);
    return it == models_.end() ? std::nullopt : std::optional(it->second);
  }

  std::optional<TrainingPool> pool_at_last_train(const NodeId& node) const {
    std::shared_lock lock(mutex_);
    auto it = pools_.find(node);
    return it == pools_.end() ? std::nullopt : std::optional(it->second);
  }

  // -------------------------------------------------------------------------
  // Active learning

  /// Scores live records whose label descends through `node` (every record
  /// at the root) and replaces the node's stored predictions.
  std::vector<PredictionRecord> infer_node(const NodeId& node, std::vector<std::string>* notices = nullptr) {
    auto m = model(node);
    if (!m) {
      if (notices) notices->push_back("node '" + node + "' has no trained model; skipped");
      return {};
    }
    const auto& path = taxonomy_.path_of(node);
    std::vector<PredictionRecord> preds;
    std::size_t without_features = 0;
    {
      std::shared_lock lock(mutex_);
      for (const auto& r : store_->records()) {
        if (r.deleted) continue;
        if (!path.empty() && !(r.label && r.label->starts_with(path))) continue;
        auto* x = features_.find(r.id);
        if (!x) {
          ++without_features;
          continue;
        }
        preds.push_back(make_prediction(r.id, node, m->version, m->classes, predict(*m, *x), options_.al.delta));
      }
    }
    if (without_features && notices) {
      notices->push_back(std::to_string(without_features) + " record(s) without features were not scored");
    }
    store_->set_predictions(node, preds);
    {
      std::unique_lock lock(mutex_);
      ++prediction_revision_;
      save_predictions_locked();
    }
    return preds;
  }

  /// Gives each confident, non-ground-truth record the pseudo label
  /// node-path + predicted class.
  std::size_t promote_pseudo_labels(const NodeId& node, const std::vector<PredictionRecord>& confident) {
    const auto& path = taxonomy_.path_of(node);
    std::vector<UpdateEvent> events;
    std::size_t promoted = 0;
    for (const auto& p : confident) {
      auto r = store_->get(p.image_id);
      if (!r || r->deleted || r->is_ground_truth()) continue;
      ++promoted;
      events.push_back(pseudo_event(p.image_id, path.child(p.predicted_class)));
    }
    store_->apply_batch(std::move(events));
    return promoted;
  }

  std::size_t pool_changes(const NodeId& node) const {
    auto current = training_pool(node);
    std::shared_lock lock(mutex_);
    auto it = pools_.find(node);
    return it == pools_.end() ? current.size() : pool_delta(current, it->second);
  }

  bool retrain_due(const NodeId& node) const {
    if (!taxonomy_.node(node).trainable()) return false;
    if (!model(node)) return !training_pool(node).empty();
    return pool_changes(node) >= options_.al.retrain_increment;
  }

  /// Revokes pseudo labels through `node`, re-scores, re-derives pseudo
  /// labels from the confident set and retrains when the pool moved enough.
  /// Only net label changes are written to the log.
  ALReport al_step(const NodeId& node) {
    if (!taxonomy_.node(node).trainable()) {
      throw Error(ErrorCode::training_refused, "node '" + node + "' is not trainable");
    }
    ALReport report;
    report.node = node;
    const auto& path = taxonomy_.path_of(node);
    auto to_label = [](const LabelPath& p) { return p.empty() ? std::optional<LabelPath>() : std::optional(p); };

    std::map<ImageId, std::optional<LabelPath>> before, desired;
    for (const auto& r : store_->records()) {
      if (r.deleted || r.label_kind != LabelKind::pseudo || !r.label) continue;
      if (!taxonomy_.class_of(*r.label, node)) continue;
      before[r.id] = r.label;
      desired[r.id] = to_label(path);
    }

    std::vector<PredictionRecord> candidates;
    if (model(node)) {
      for (auto& p : infer_node(node, &report.notices)) {
        auto r = store_->get(p.image_id);
        if (!r) continue;
        auto label = desired.count(r->id) ? desired[r->id] : r->label;
        const bool unlabeled_here = path.empty() ? !label : (label && *label == path);
        if (unlabeled_here) candidates.push_back(std::move(p));
      }
      report.scored = candidates.size();
    } else {
      report.notices.push_back("node '" + node + "' has no trained model; nothing scored");
    }

    auto parts = partition(std::move(candidates), options_.al);
    report.confident_count = parts.confident.size();
    report.uncertain_count = parts.uncertain.size();
    for (const auto& p : parts.confident) {
      auto r = store_->get(p.image_id);
      if (!r || r->is_ground_truth()) continue;
      if (!before.count(r->id)) before[r->id] = r->label;
      desired[r->id] = path.child(p.predicted_class);
      ++report.promoted;
    }
    for (std::size_t i = 0; i < parts.uncertain.size() && i < options_.al.max_uncertain_page; ++i) {
      report.top_uncertain.push_back(parts.uncertain[i].image_id);
    }

    std::vector<UpdateEvent> events;
    for (const auto& [id, label] : desired) {
      const auto& old = before[id];
      if (label == old) continue;
      if (old && old->starts_with(path) && old->depth() > path.depth() && (!label || label->depth() <= path.depth())) {
        ++report.revoked;
      }
      events.push_back(pseudo_event(id, label));
    }
    for (const auto& r : store_->apply_batch(std::move(events))) {
      if (!r.event && !r.notice.empty()) report.notices.push_back(r.notice);
    }

    report.pool_changes = pool_changes(node);
    if (retrain_due(node)) {
      try {
        auto outcome = train(node);
        report.retrained = true;
        report.model_version = outcome.result.model.version;
        report.new_macro_f1 = outcome.result.model.macro_f1;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::training_refused) throw;
        report.notices.push_back(std::string("retrain refused: ") + e.what());
      }
    }
    return report;
  }

  // -------------------------------------------------------------------------
  // Projection

  ProjectionKey projection_key(const NodeId& node, Subset subset, ProjectionMethod method,
                               std::uint64_t seed) const {
    taxonomy_.node(node);
    ProjectionKey key;
    key.node = node;
    key.subset = subset;
    key.method = method;
    key.seed = seed;
    std::shared_lock lock(mutex_);
    detail::Fnv1a h;
    h.add_value(store_->version());
    h.add_value(prediction_revision_);
    key.store_version = h.value();
    key.feature_fingerprint = feature_fingerprint_locked();
    key.perplexity = method == ProjectionMethod::tsne ? options_.perplexity : 0.0;
    key.nh_k = options_.nh_k;
    return key;
  }

  std::optional<ProjectionSet> cached_projection(const ProjectionKey& key) const {
    const auto h = key.hash();
    {
      std::shared_lock lock(mutex_);
      if (auto it = projections_.find(h); it != projections_.end()) return it->second;
    }
    if (dir_.empty()) return std::nullopt;
    auto file = dir_ / "projections" / (key.hex() + ".bin");
    if (!std::filesystem::exists(file)) return std::nullopt;
    auto set = decode_projection(read_file_bytes(file));
    std::unique_lock lock(mutex_);
    projections_[h] = set;
    return set;
  }

  /// Projects the records of `subset` that belong to `node`, computing and
  /// caching on a miss.
  ProjectionSet project(const NodeId& node, Subset subset, ProjectionMethod method, std::uint64_t seed) {
    const auto key = projection_key(node, subset, method, seed);
    if (auto cached = cached_projection(key)) return *cached;

    QueryFilter filter;
    filter.node = node;
    filter.subset = subset;
    const auto records = store_->query(filter);
    const auto preds = store_->predictions(node);
    ProjectionSet set;
    set.node = node;
    set.subset = subset;
    set.method = method;
    set.seed = seed;
    std::vector<std::vector<double>> rows;
    std::vector<HitPoint> hits;
    std::vector<ImageId> missing;
    {
      std::shared_lock lock(mutex_);
      for (const auto& r : records) {
        auto* x = features_.find(r.id);
        if (!x) {
          missing.push_back(r.id);
          continue;
        }
        rows.push_back(*x);
        HitPoint hp;
        hp.id = r.id;
        if (r.is_ground_truth() && r.label) {
          if (auto cls = taxonomy_.class_of(*r.label, node)) {
            hp.cls = *cls;
            hp.labeled = true;
          }
        }
        if (!hp.labeled) {
          if (auto it = preds.find(r.id); it != preds.end()) hp.cls = it->second.predicted_class;
        }
        hits.push_back(std::move(hp));
      }
    }
    if (records.empty()) {
      throw Error(ErrorCode::invalid_argument,
                  "no records in subset '" + std::string(to_string(subset)) + "' at node '" + node + "'");
    }
    if (!missing.empty()) {
      std::vector<std::string> shown(missing.begin(), missing.begin() + std::min<std::size_t>(missing.size(), 20));
      throw Error(ErrorCode::unavailable, std::to_string(missing.size()) + " record(s) lack features: " +
                                              detail::join(shown, ',') + (missing.size() > 20 ? ",..." : ""));
    }
    const auto x = Matrix::from_rows(rows);
    std::vector<Point2> coords;
    if (method == ProjectionMethod::pca) {
      auto r = pca(x);
      coords = std::move(r.coords);
      set.warnings.insert(set.warnings.end(), r.warnings.begin(), r.warnings.end());
    } else {
      TsneConfig tc;
      tc.perplexity = options_.perplexity;
      tc.iterations = options_.tsne_iterations;
      tc.seed = seed;
      coords = tsne(x, tc).coords;
    }
    for (std::size_t i = 0; i < hits.size(); ++i) hits[i].pos = coords[i];
    const auto nh = neighborhood_hit(hits, options_.nh_k);
    for (std::size_t i = 0; i < hits.size(); ++i) {
      set.points.push_back({hits[i].id, static_cast<float>(coords[i][0]), static_cast<float>(coords[i][1]),
                            static_cast<float>(nh[i])});
    }
    // Round-trip through the cache encoding so fresh and cached sets agree.
    set.points = decode_projection(encode_projection(set)).points;
    std::unique_lock lock(mutex_);
    projections_[key.hash()] = set;
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_ / "projections");
      write_bytes(dir_ / "projections" / (key.hex() + ".bin"), encode_projection(set));
    }
    return set;
  }

  /// Nearest neighbors of `image_id` in a cached projection, laid out around
  /// it. Throws `conflict` when the projection or the image is not cached.
  Neighborhood neighborhood(const ImageId& image_id, const ProjectionKey& key, layout::Preset preset,
                            LayoutKind kind) const {
    auto set = cached_projection(key);
    if (!set) {
      throw Error(ErrorCode::conflict, "projection not cached; refresh the projection first");
    }
    const auto* center = set->find(image_id);
    if (!center) {
      throw Error(ErrorCode::conflict, "image '" + image_id + "' is not in the cached projection; refresh it");
    }
    struct Cand {
      double d2;
      const ProjectionPoint* p;
    };
    std::vector<Cand> cands;
    for (const auto& p : set->points) {
      if (p.image_id == image_id) continue;
      const double dx = double(p.x) - center->x, dy = double(p.y) - center->y;
      cands.push_back({dx * dx + dy * dy, &p});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d2 != b.d2) return a.d2 < b.d2;
      return a.p->image_id < b.p->image_id;
    });
    const std::size_t cap = layout::total_capacity(preset);
    if (cands.size() > cap) cands.resize(cap);

    Neighborhood out;
    switch (kind) {
      case LayoutKind::spiral: {
        std::vector<std::string> ids;
        for (const auto& c : cands) ids.push_back(c.p->image_id);
        out.layout = layout::spiral_layout(image_id, ids, preset);
        break;
      }
      case LayoutKind::spatial: {
        std::vector<layout::SpatialItem> items;
        for (const auto& c : cands) items.push_back({c.p->image_id, c.p->x, c.p->y});
        out.layout = layout::spatial_spiral_layout({image_id, center->x, center->y}, items, preset);
        break;
      }
      case LayoutKind::grid: {
        std::vector<std::string> ids = {image_id};
        for (const auto& c : cands) ids.push_back(c.p->image_id);
        const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(ids.size()))));
        out.layout = layout::grid_layout(ids, cols);
        break;
      }
    }
    for (const auto& b : out.layout.boxes) {
      BoxDetails d;
      d.image_id = b.image_id;
      if (auto r = store_->get(b.image_id)) {
        if (r->label) {
          d.label = r->label->str();
          d.class_mark = taxonomy_.class_of(*r->label, key.node);
        }
        d.label_kind = r->label_kind;
        d.caption = r->caption;
        d.source = r->source;
        d.deleted = r->deleted;
      }
      d.prediction = store_->prediction(key.node, b.image_id);
      out.details.push_back(std::move(d));
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Saliency and export

  Heatmap saliency(const ImageId& image_id, const NodeId& node, std::optional<std::string> cls = {}) const {
    auto m = model(node);
    if (!m) throw Error(ErrorCode::unavailable, "node '" + node + "' has no trained model");
    auto rec = store_->get(image_id);
    if (!rec) throw Error(ErrorCode::unknown_image, "unknown image '" + image_id + "'");
    auto x = features(image_id);
    if (!x) throw Error(ErrorCode::unavailable, "image '" + image_id + "' has no features");
    std::size_t idx;
    if (cls) {
      auto it = std::find(m->classes.begin(), m->classes.end(), *cls);
      if (it == m->classes.end()) {
        throw Error(ErrorCode::invalid_argument, "'" + *cls + "' is not a class of '" + node + "'");
      }
      idx = static_cast<std::size_t>(it - m->classes.begin());
    } else {
      idx = argmax(predict(*m, *x));
    }
    const std::uint32_t w = rec->width ? rec->width : kGridSide;
    const std::uint32_t h = rec->height ? rec->height : kGridSide;
    return hilab::saliency(*m, *x, w, h, idx);
  }

  /// Live records in manifest form; pseudo labels are not exported.
  std::string export_labels() const {
    std::string out = "id,uri,source,label,split,caption\n";
    for (const auto& r : store_->records()) {
      if (r.deleted) continue;
      const std::string label = r.is_ground_truth() && r.label ? r.label->str() : "";
      const std::string split = r.is_ground_truth() ? to_string(r.split) : "";
      out += quote_field(r.id) + ',' + quote_field(r.uri) + ',' + quote_field(r.source) + ',' +
             quote_field(label) + ',' + split + ',' + quote_field(r.caption.value_or("")) + '\n';
    }
    return out;
  }

 private:
  static UpdateEvent pseudo_event(const ImageId& id, std::optional<LabelPath> label) {
    UpdateEvent e;
    e.session_id = kSystemSession;
    e.image_id = id;
    e.action = UpdateAction::pseudo_label;
    e.new_label = std::move(label);
    return e;
  }

  std::uint64_t feature_fingerprint_locked() const {
    std::lock_guard guard(fingerprint_mutex_);
    if (fingerprint_revision_ != features_.revision() || !fingerprint_) {
      fingerprint_ = features_.fingerprint();
      fingerprint_revision_ = features_.revision();
    }
    return *fingerprint_;
  }

  static void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static void write_text(const std::filesystem::path& path, const std::string& text) {
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  void save_features_locked() {
    if (dir_.empty()) return;
    std::vector<MatrixRow> rows;
    for (const auto& [id, v] : features_.all()) rows.push_back({id, v});
    write_bytes(dir_ / "features.bin", encode_matrix(rows, static_cast<std::uint32_t>(features_.dim())));
    write_text(dir_ / "features.kind", std::string(to_string(features_.kind())) + "\n");
  }

  void save_model_locked(const NodeId& node) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_ / "models");
    save_model(models_.at(node), dir_ / "models" / (node + ".model"));
    std::string pool;
    for (const auto& [id, cls] : pools_.at(node)) pool += id + '\t' + cls + '\n';
    write_text(dir_ / "models" / (node + ".pool"), pool);
  }

  void save_predictions_locked() {
    if (dir_.empty()) return;
    std::string text;
    for (const auto& [node, preds] : store_->all_predictions()) {
      for (const auto& [id, p] : preds) {
        nlohmann::json j = {{"image_id", p.image_id}, {"node", p.node},         {"model_version", p.model_version},
                            {"probs", p.probs},       {"entropy", p.entropy},   {"margin", p.margin},
                            {"confident", p.confident}, {"predicted_class", p.predicted_class}};
        text += j.dump() + '\n';
      }
    }
    write_text(dir_ / "predictions.jsonl", text);
  }

  void load_derived() {
    if (std::filesystem::exists(dir_ / "features.bin")) {
      auto m = decode_matrix(read_file_bytes(dir_ / "features.bin"));
      FeatureKind kind = FeatureKind::external;
      std::ifstream kin(dir_ / "features.kind");
      std::string k;
      if (kin >> k && k == "builtin") kind = FeatureKind::builtin;
      for (auto& row : m.rows) features_.attach(row.id, std::move(row.values), kind);
    }
    if (std::filesystem::exists(dir_ / "models")) {
      for (const auto& entry : std::filesystem::directory_iterator(dir_ / "models")) {
        if (entry.path().extension() != ".model") continue;
        auto m = load_model(entry.path());
        auto pool_file = entry.path();
        pool_file.replace_extension(".pool");
        TrainingPool pool;
        std::ifstream in(pool_file);
        std::string line;
        while (std::getline(in, line)) {
          auto parts = detail::split(line, '\t');
          if (parts.size() == 2) pool[parts[0]] = parts[1];
        }
        pools_[m.node] = std::move(pool);
        models_[m.node] = std::move(m);
      }
    }
    if (std::filesystem::exists(dir_ / "predictions.jsonl")) {
      std::map<NodeId, std::vector<PredictionRecord>> by_node;
      std::ifstream in(dir_ / "predictions.jsonl");
      std::string line;
      while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line);
        PredictionRecord p;
        p.image_id = j.at("image_id").get<std::string>();
        p.node = j.at("node").get<std::string>();
        p.model_version = j.at("model_version").get<std::uint32_t>();
        p.probs = j.at("probs").get<std::vector<double>>();
        p.entropy = j.at("entropy").get<double>();
        p.margin = j.at("margin").get<double>();
        p.confident = j.at("confident").get<bool>();
        p.predicted_class = j.at("predicted_class").get<std::string>();
        by_node[p.node].push_back(std::move(p));
      }
      for (auto& [node, preds] : by_node) store_->set_predictions(node, std::move(preds));
    }
  }

  Taxonomy taxonomy_;
  WorkspaceOptions options_;
  std::filesystem::path dir_;
  std::unique_ptr<Store> store_;
  Trainer trainer_;

  mutable std::shared_mutex mutex_;
  FeatureTable features_;
  std::map<NodeId, Model> models_;
  std::map<NodeId, TrainingPool> pools_;
  std::uint64_t prediction_revision_ = 0;
  mutable std::map<std::uint64_t, ProjectionSet> projections_;
  mutable std::mutex fingerprint_mutex_;
  mutable std::optional<std::uint64_t> fingerprint_;
  mutable std::uint64_t fingerprint_revision_ = 0;
};

}  // namespace hilab
