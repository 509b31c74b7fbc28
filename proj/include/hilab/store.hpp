#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hilab/common.hpp"
#include "hilab/taxonomy.hpp"

namespace hilab {

using ImageId = std::string;

enum class LabelKind { none, ground_truth, pseudo };
enum class Split { train, val, test, unlabeled };

/// Record subsets selectable in the projection and filter views.
enum class Subset { train, val, test, unlabeled, unlabeled_train, all };

inline const char* to_string(LabelKind k) {
  switch (k) {
    case LabelKind::none: return "none";
    case LabelKind::ground_truth: return "ground_truth";
    case LabelKind::pseudo: return "pseudo";
  }
  return "none";
}

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

inline const char* to_string(Subset s) {
  switch (s) {
    case Subset::train: return "train";
    case Subset::val: return "val";
    case Subset::test: return "test";
    case Subset::unlabeled: return "unlabeled";
    case Subset::unlabeled_train: return "unlabeled+train";
    case Subset::all: return "all";
  }
  return "all";
}

inline LabelKind parse_label_kind(std::string_view s) {
  if (s == "none") return LabelKind::none;
  if (s == "ground_truth") return LabelKind::ground_truth;
  if (s == "pseudo") return LabelKind::pseudo;
  throw Error(ErrorCode::invalid_argument, "unknown label kind '" + std::string(s) + "'");
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unlabeled") return Split::unlabeled;
  throw Error(ErrorCode::invalid_argument, "unknown split '" + std::string(s) + "'");
}

inline Subset parse_subset(std::string_view s) {
  if (s == "train") return Subset::train;
  if (s == "val") return Subset::val;
  if (s == "test") return Subset::test;
  if (s == "unlabeled") return Subset::unlabeled;
  if (s == "unlabeled+train" || s == "unlabeled_train") return Subset::unlabeled_train;
  if (s == "all") return Subset::all;
  throw Error(ErrorCode::invalid_argument, "unknown subset '" + std::string(s) + "'");
}

inline bool subset_contains(Subset subset, Split split) {
  switch (subset) {
    case Subset::train: return split == Split::train;
    case Subset::val: return split == Split::val;
    case Subset::test: return split == Split::test;
    case Subset::unlabeled: return split == Split::unlabeled;
    case Subset::unlabeled_train: return split == Split::unlabeled || split == Split::train;
    case Subset::all: return true;
  }
  return false;
}

struct ImageRecord {
  ImageId id;
  std::string source;
  std::string uri;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::optional<std::string> caption;
  std::optional<LabelPath> label;
  LabelKind label_kind = LabelKind::none;
  Split split = Split::unlabeled;
  bool deleted = false;

  bool is_ground_truth() const { return label_kind == LabelKind::ground_truth; }

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// Output of one classifier for one image.
struct PredictionRecord {
  ImageId image_id;
  NodeId node;
  std::uint32_t model_version = 0;
  std::vector<double> probs;
  std::string predicted_class;
  double entropy = 0.0;
  double margin = 0.0;
  bool confident = false;

  double top_probability() const {
    return probs.empty() ? 0.0 : *std::max_element(probs.begin(), probs.end());
  }
};

enum class UpdateAction { relabel, remove, restore, pseudo_label, assign_split };

inline const char* to_string(UpdateAction a) {
  switch (a) {
    case UpdateAction::relabel: return "relabel";
    case UpdateAction::remove: return "delete";
    case UpdateAction::restore: return "restore";
    case UpdateAction::pseudo_label: return "pseudo_label";
    case UpdateAction::assign_split: return "assign_split";
  }
  return "relabel";
}

inline UpdateAction parse_update_action(std::string_view s) {
  if (s == "relabel") return UpdateAction::relabel;
  if (s == "delete") return UpdateAction::remove;
  if (s == "restore") return UpdateAction::restore;
  if (s == "pseudo_label") return UpdateAction::pseudo_label;
  if (s == "assign_split") return UpdateAction::assign_split;
  throw Error(ErrorCode::invalid_argument, "unknown update action '" + std::string(s) + "'");
}

/// Session id used for engine-originated events (pseudo-labels, split
/// assignment). Never produced by clients.
inline const std::string kSystemSession = "_system";

struct UpdateEvent {
  std::uint64_t seq = 0;
  std::string session_id;
  ImageId image_id;
  UpdateAction action = UpdateAction::relabel;
  std::optional<LabelPath> old_label;
  std::optional<LabelPath> new_label;
  LabelKind old_kind = LabelKind::none;
  Split old_split = Split::unlabeled;
  std::optional<Split> new_split;
  std::string timestamp;

  friend bool operator==(const UpdateEvent&, const UpdateEvent&) = default;
};

struct UpdateResult {
  ImageRecord record;
  std::optional<UpdateEvent> event;
  bool noop = false;
  std::string notice;
};

struct QueryFilter {
  std::optional<NodeId> node;
  std::optional<Subset> subset;
  std::set<std::string> label_classes;
  std::set<std::string> predicted_classes;
  std::set<std::string> sources;
  std::optional<std::pair<double, double>> probability;
  /// false: only live records; true: only deleted records.
  bool deleted = false;
};

struct IngestReport {
  std::size_t ingested = 0;
  std::vector<std::string> rejected;  // one line per rejected row
};

struct ManifestRow {
  std::size_t line = 0;
  std::string id, uri, source, label, split, caption;
};

// ---------------------------------------------------------------------------
// JSON mapping

inline nlohmann::json to_json(const ImageRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["source"] = r.source;
  j["uri"] = r.uri;
  j["width"] = r.width;
  j["height"] = r.height;
  j["caption"] = r.caption ? nlohmann::json(*r.caption) : nlohmann::json(nullptr);
  j["label"] = r.label ? nlohmann::json(r.label->str()) : nlohmann::json(nullptr);
  j["label_kind"] = to_string(r.label_kind);
  j["split"] = to_string(r.split);
  j["deleted"] = r.deleted;
  return j;
}

inline ImageRecord record_from_json(const nlohmann::json& j) {
  ImageRecord r;
  r.id = j.at("id").get<std::string>();
  r.source = j.value("source", "");
  r.uri = j.value("uri", "");
  r.width = j.value("width", 0u);
  r.height = j.value("height", 0u);
  if (j.contains("caption") && !j["caption"].is_null()) r.caption = j["caption"].get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) {
    r.label = LabelPath::parse(j["label"].get<std::string>());
  }
  r.label_kind = parse_label_kind(j.value("label_kind", "none"));
  r.split = parse_split(j.value("split", "unlabeled"));
  r.deleted = j.value("deleted", false);
  return r;
}

inline nlohmann::json to_json(const UpdateEvent& e) {
  auto opt_label = [](const std::optional<LabelPath>& l) {
    return l ? nlohmann::json(l->str()) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["seq"] = e.seq;
  j["session_id"] = e.session_id;
  j["image_id"] = e.image_id;
  j["action"] = to_string(e.action);
  j["old_label"] = opt_label(e.old_label);
  j["new_label"] = opt_label(e.new_label);
  j["old_kind"] = to_string(e.old_kind);
  j["old_split"] = to_string(e.old_split);
  j["new_split"] = e.new_split ? nlohmann::json(to_string(*e.new_split)) : nlohmann::json(nullptr);
  j["timestamp"] = e.timestamp;
  return j;
}

inline UpdateEvent event_from_json(const nlohmann::json& j) {
  auto opt_label = [&](const char* key) -> std::optional<LabelPath> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return LabelPath::parse(j[key].get<std::string>());
  };
  UpdateEvent e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.session_id = j.value("session_id", "");
  e.image_id = j.at("image_id").get<std::string>();
  e.action = parse_update_action(j.at("action").get<std::string>());
  e.old_label = opt_label("old_label");
  e.new_label = opt_label("new_label");
  e.old_kind = parse_label_kind(j.value("old_kind", "none"));
  e.old_split = parse_split(j.value("old_split", "unlabeled"));
  if (j.contains("new_split") && !j["new_split"].is_null()) {
    e.new_split = parse_split(j["new_split"].get<std::string>());
  }
  e.timestamp = j.value("timestamp", "");
  return e;
}

inline std::string utc_now() {
  auto now = std::chrono::system_clock::now();
  auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Manifest (delimiter-separated, quoted fields allowed)

inline std::vector<std::vector<std::string>> parse_delimited(std::string_view text, char delim = ',') {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == delim) {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field.push_back(c);
      any = true;
    }
  }
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string quote_field(const std::string& s, char delim = ',') {
  if (s.find_first_of(std::string("\"\r\n") + delim) == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

/// Parses a manifest with header `id,uri,source,label,split,caption`. Columns
/// are matched by header name; unknown headers fall back to that order.
inline std::vector<ManifestRow> parse_manifest(std::string_view text, char delim = ',') {
  auto rows = parse_delimited(text, delim);
  std::vector<ManifestRow> out;
  if (rows.empty()) return out;
  static const std::vector<std::string> kColumns = {"id", "uri", "source", "label", "split", "caption"};
  std::vector<int> col(kColumns.size(), -1);
  const auto& header = rows[0];
  bool named = false;
  for (std::size_t i = 0; i < header.size(); ++i) {
    auto name = detail::trim(header[i]);
    auto it = std::find(kColumns.begin(), kColumns.end(), name);
    if (it != kColumns.end()) {
      col[it - kColumns.begin()] = static_cast<int>(i);
      named = true;
    }
  }
  if (!named) {
    for (std::size_t i = 0; i < kColumns.size(); ++i) col[i] = static_cast<int>(i);
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    auto get = [&](std::size_t c) -> std::string {
      int idx = col[c];
      if (idx < 0 || static_cast<std::size_t>(idx) >= row.size()) return "";
      return row[idx];
    };
    ManifestRow m;
    m.line = r + 1;
    m.id = detail::trim(get(0));
    m.uri = detail::trim(get(1));
    m.source = detail::trim(get(2));
    m.label = detail::trim(get(3));
    m.split = detail::trim(get(4));
    m.caption = get(5);
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Catalog of image records plus the append-only update log. All mutations
/// go through one writer lock; readers get copies taken under a shared lock.
class Store {
 public:
  explicit Store(const Taxonomy& taxonomy) : taxonomy_(&taxonomy) {}
  explicit Store(Taxonomy&&) = delete;

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  /// Opens (or creates) a persistent store in `dir`: `snapshot.jsonl` holds
  /// the compacted state, `events.jsonl` every event ever applied.
  static std::unique_ptr<Store> open(const Taxonomy& taxonomy, const std::filesystem::path& dir) {
    auto store = std::make_unique<Store>(taxonomy);
    store->dir_ = dir;
    std::filesystem::create_directories(dir);
    store->load_from_disk();
    return store;
  }
  static std::unique_ptr<Store> open(Taxonomy&&, const std::filesystem::path&) = delete;

  const Taxonomy& taxonomy() const { return *taxonomy_; }

  IngestReport ingest(const std::vector<ManifestRow>& rows) {
    std::unique_lock lock(mutex_);
    IngestReport report;
    bool changed = false;
    for (const auto& row : rows) {
      auto where = "row " + std::to_string(row.line) + " (" + row.id + "): ";
      if (row.id.empty()) {
        report.rejected.push_back(where + "missing id");
        continue;
      }
      ImageRecord rec;
      rec.id = row.id;
      rec.uri = row.uri;
      rec.source = row.source;
      if (!row.caption.empty()) rec.caption = row.caption;
      try {
        if (!row.label.empty()) {
          auto label = LabelPath::parse(row.label);
          taxonomy_->validate_label(label);
          rec.label = label;
          rec.label_kind = LabelKind::ground_truth;
        }
        if (!row.split.empty()) {
          rec.split = parse_split(row.split);
        } else if (rec.label) {
          // Provisional until assign_splits runs.
          rec.split = Split::train;
        }
        if (rec.split == Split::unlabeled && rec.label_kind == LabelKind::ground_truth) {
          throw Error(ErrorCode::invalid_argument, "labeled row pinned to the unlabeled split");
        }
        if ((rec.split == Split::val || rec.split == Split::test) && rec.label_kind != LabelKind::ground_truth) {
          throw Error(ErrorCode::invalid_argument, std::string("unlabeled row pinned to ") + to_string(rec.split));
        }
      } catch (const Error& e) {
        report.rejected.push_back(where + e.what());
        continue;
      }
      auto it = index_.find(rec.id);
      if (it != index_.end()) {
        const auto& baseline = baseline_[baseline_index_.at(rec.id)];
        if (baseline.uri != rec.uri || baseline.source != rec.source ||
            baseline.label != rec.label || baseline.caption != rec.caption) {
          report.rejected.push_back(where + "duplicate id with conflicting fields");
        } else {
          ++report.ingested;
        }
        continue;
      }
      index_[rec.id] = records_.size();
      records_.push_back(rec);
      baseline_index_[rec.id] = baseline_.size();
      baseline_.push_back(rec);
      ++report.ingested;
      changed = true;
    }
    if (changed) {
      ++generation_;
      compact_locked();
    }
    return report;
  }

  /// Sets pixel dimensions for a record (read from the image file by callers).
  void set_dimensions(const ImageId& id, std::uint32_t w, std::uint32_t h) {
    std::unique_lock lock(mutex_);
    auto& rec = records_.at(index_at(id));
    rec.width = w;
    rec.height = h;
    auto bi = baseline_index_.find(id);
    if (bi != baseline_index_.end()) {
      baseline_[bi->second].width = w;
      baseline_[bi->second].height = h;
    }
  }

  /// Applies one update. The caller fills session_id, image_id, action and
  /// new_label / new_split; seq, old values and timestamp are filled here.
  UpdateResult apply_update(UpdateEvent event) {
    std::unique_lock lock(mutex_);
    return apply_locked(std::move(event));
  }

  std::vector<UpdateResult> apply_batch(std::vector<UpdateEvent> events) {
    std::unique_lock lock(mutex_);
    std::vector<UpdateResult> out;
    for (auto& e : events) {
      try {
        out.push_back(apply_locked(std::move(e)));
      } catch (const Error& err) {
        UpdateResult r;
        r.noop = true;
        r.notice = std::string(to_string(err.code())) + ": " + err.what();
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  std::optional<ImageRecord> get(const ImageId& id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
  }

  /// All records (live and deleted), sorted by id.
  std::vector<ImageRecord> records() const {
    std::shared_lock lock(mutex_);
    auto out = records_;
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  }

  std::vector<ImageRecord> baseline() const {
    std::shared_lock lock(mutex_);
    return baseline_;
  }

  std::vector<UpdateEvent> events() const {
    std::shared_lock lock(mutex_);
    return log_;
  }

  /// Events applied after the last snapshot; replay(baseline(), tail_events())
  /// reproduces records().
  std::vector<UpdateEvent> tail_events() const {
    std::shared_lock lock(mutex_);
    std::vector<UpdateEvent> out;
    for (const auto& e : log_) {
      if (e.seq >= snapshot_seq_) out.push_back(e);
    }
    return out;
  }

  std::vector<UpdateEvent> session_events(const std::string& session_id) const {
    std::shared_lock lock(mutex_);
    std::vector<UpdateEvent> out;
    for (const auto& e : log_) {
      if (e.session_id == session_id) out.push_back(e);
    }
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
  }

  /// Changes whenever any record changes; used in projection cache keys.
  std::uint64_t version() const {
    std::shared_lock lock(mutex_);
    return (generation_ << 40) ^ next_seq_;
  }

  // Predictions are derived data: not event-sourced, replaced per inference run.

  void set_predictions(const NodeId& node, std::vector<PredictionRecord> preds) {
    std::unique_lock lock(mutex_);
    auto& m = predictions_[node];
    m.clear();
    for (auto& p : preds) {
      auto id = p.image_id;
      m.emplace(std::move(id), std::move(p));
    }
  }

  std::optional<PredictionRecord> prediction(const NodeId& node, const ImageId& id) const {
    std::shared_lock lock(mutex_);
    auto it = predictions_.find(node);
    if (it == predictions_.end()) return std::nullopt;
    auto jt = it->second.find(id);
    if (jt == it->second.end()) return std::nullopt;
    return jt->second;
  }

  std::map<ImageId, PredictionRecord> predictions(const NodeId& node) const {
    std::shared_lock lock(mutex_);
    auto it = predictions_.find(node);
    if (it == predictions_.end()) return {};
    return it->second;
  }

  std::map<NodeId, std::map<ImageId, PredictionRecord>> all_predictions() const {
    std::shared_lock lock(mutex_);
    return predictions_;
  }

  /// Conjunctive filter; results sorted by id.
  std::vector<ImageRecord> query(const QueryFilter& f) const {
    std::shared_lock lock(mutex_);
    const NodeId node = f.node.value_or(taxonomy_->root());
    const auto& path = taxonomy_->path_of(node);
    const std::map<ImageId, PredictionRecord>* preds = nullptr;
    if (auto it = predictions_.find(node); it != predictions_.end()) preds = &it->second;
    std::vector<ImageRecord> out;
    for (const auto& r : records_) {
      if (r.deleted != f.deleted) continue;
      const PredictionRecord* p = nullptr;
      if (preds) {
        if (auto jt = preds->find(r.id); jt != preds->end()) p = &jt->second;
      }
      auto cls = r.label ? taxonomy_->class_of(*r.label, node) : std::nullopt;
      if (f.node && node != taxonomy_->root() && !p && !(r.label && r.label->starts_with(path))) continue;
      if (f.subset && !subset_contains(*f.subset, r.split)) continue;
      if (!f.label_classes.empty() && (!cls || !f.label_classes.count(*cls))) continue;
      if (!f.predicted_classes.empty() && (!p || !f.predicted_classes.count(p->predicted_class))) {
        continue;
      }
      if (!f.sources.empty() && !f.sources.count(r.source)) continue;
      if (f.probability) {
        if (!p) continue;
        double top = p->top_probability();
        if (top < f.probability->first || top > f.probability->second) continue;
      }
      out.push_back(r);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  }

  /// Re-applies an event log over a baseline without validation.
  static std::vector<ImageRecord> replay(std::vector<ImageRecord> baseline,
                                         const std::vector<UpdateEvent>& events) {
    std::map<ImageId, std::size_t> idx;
    for (std::size_t i = 0; i < baseline.size(); ++i) idx[baseline[i].id] = i;
    for (const auto& e : events) {
      auto it = idx.find(e.image_id);
      if (it == idx.end()) continue;
      mutate(baseline[it->second], e);
    }
    return baseline;
  }

  /// Rewrites the snapshot as the current state. Events stay in the log for
  /// session history; replay skips those at or below the snapshot's seq.
  void compact() {
    std::unique_lock lock(mutex_);
    compact_locked();
  }

  /// Drops soft-deleted records permanently.
  std::size_t purge_deleted() {
    std::unique_lock lock(mutex_);
    std::vector<ImageRecord> keep;
    std::size_t purged = 0;
    for (auto& r : records_) {
      if (r.deleted) ++purged;
      else keep.push_back(std::move(r));
    }
    records_ = std::move(keep);
    index_.clear();
    for (std::size_t i = 0; i < records_.size(); ++i) index_[records_[i].id] = i;
    if (purged) {
      ++generation_;
      compact_locked();
    }
    return purged;
  }

 private:
  std::size_t index_at(const ImageId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::unknown_image, "unknown image '" + id + "'");
    return it->second;
  }

  static void mutate(ImageRecord& rec, const UpdateEvent& e) {
    switch (e.action) {
      case UpdateAction::relabel:
        rec.label = e.new_label;
        rec.label_kind = LabelKind::ground_truth;
        if (rec.split == Split::unlabeled) rec.split = Split::train;
        break;
      case UpdateAction::remove:
        rec.deleted = true;
        break;
      case UpdateAction::restore:
        rec.deleted = false;
        break;
      case UpdateAction::pseudo_label:
        rec.label = e.new_label;
        rec.label_kind = e.new_label ? LabelKind::pseudo : LabelKind::none;
        break;
      case UpdateAction::assign_split:
        if (e.new_split) rec.split = *e.new_split;
        break;
    }
  }

  UpdateResult apply_locked(UpdateEvent e) {
    auto& rec = records_.at(index_at(e.image_id));
    UpdateResult result;
    switch (e.action) {
      case UpdateAction::relabel:
        if (!e.new_label) throw Error(ErrorCode::invalid_label, "relabel without a new label");
        taxonomy_->validate_label(*e.new_label);
        if (rec.deleted) {
          throw Error(ErrorCode::conflict, "image '" + rec.id + "' is deleted; restore it first");
        }
        if (rec.label == e.new_label && rec.label_kind == LabelKind::ground_truth) {
          result.record = rec;
          result.noop = true;
          result.notice = "image '" + rec.id + "' already has that label";
          return result;
        }
        break;
      case UpdateAction::remove:
        e.new_label.reset();
        if (rec.deleted) {
          result.record = rec;
          result.noop = true;
          result.notice = "image '" + rec.id + "' already deleted";
          return result;
        }
        break;
      case UpdateAction::restore:
        e.new_label.reset();
        if (!rec.deleted) {
          result.record = rec;
          result.noop = true;
          result.notice = "image '" + rec.id + "' is not deleted";
          return result;
        }
        break;
      case UpdateAction::pseudo_label:
        if (rec.label_kind == LabelKind::ground_truth) {
          throw Error(ErrorCode::conflict, "image '" + rec.id + "' has a ground-truth label");
        }
        if (e.new_label) taxonomy_->validate_label(*e.new_label);
        if (rec.label == e.new_label) {
          result.record = rec;
          result.noop = true;
          return result;
        }
        break;
      case UpdateAction::assign_split:
        if (!e.new_split) throw Error(ErrorCode::invalid_argument, "assign_split without a split");
        if (*e.new_split != Split::train && *e.new_split != Split::unlabeled &&
            rec.label_kind != LabelKind::ground_truth) {
          throw Error(ErrorCode::conflict,
                      "image '" + rec.id + "' without a ground-truth label cannot enter val/test");
        }
        if (rec.split == *e.new_split) {
          result.record = rec;
          result.noop = true;
          return result;
        }
        break;
    }
    e.seq = next_seq_++;
    e.old_label = rec.label;
    e.old_kind = rec.label_kind;
    e.old_split = rec.split;
    if (e.timestamp.empty()) e.timestamp = utc_now();
    mutate(rec, e);
    log_.push_back(e);
    append_event(e);
    result.record = rec;
    result.event = std::move(e);
    return result;
  }

  void append_event(const UpdateEvent& e) {
    if (dir_.empty()) return;
    std::ofstream out(dir_ / "events.jsonl", std::ios::app | std::ios::binary);
    out << to_json(e).dump() << '\n';
    if (!out) throw Error(ErrorCode::io_error, "cannot append to event log in " + dir_.string());
  }

  void compact_locked() {
    // The in-memory baseline tracks the snapshot so replay() stays exact.
    baseline_ = records_;
    baseline_index_.clear();
    for (std::size_t i = 0; i < baseline_.size(); ++i) baseline_index_[baseline_[i].id] = i;
    snapshot_seq_ = next_seq_;
    if (dir_.empty()) return;
    auto tmp = dir_ / "snapshot.jsonl.tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      nlohmann::json header = {{"snapshot_next_seq", snapshot_seq_}, {"generation", generation_}};
      out << header.dump() << '\n';
      for (const auto& r : records_) out << to_json(r).dump() << '\n';
      if (!out) throw Error(ErrorCode::io_error, "cannot write snapshot in " + dir_.string());
    }
    std::filesystem::rename(tmp, dir_ / "snapshot.jsonl");
  }

  void load_from_disk() {
    auto snap = dir_ / "snapshot.jsonl";
    if (std::filesystem::exists(snap)) {
      std::ifstream in(snap, std::ios::binary);
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
          throw Error(ErrorCode::io_error, "corrupt snapshot line " + std::to_string(line_no) +
                                               ": " + e.what());
        }
        if (j.contains("snapshot_next_seq")) {
          snapshot_seq_ = j["snapshot_next_seq"].get<std::uint64_t>();
          generation_ = j.value("generation", 0ull);
          continue;
        }
        auto rec = record_from_json(j);
        index_[rec.id] = records_.size();
        records_.push_back(std::move(rec));
      }
    }
    baseline_ = records_;
    for (std::size_t i = 0; i < baseline_.size(); ++i) baseline_index_[baseline_[i].id] = i;
    next_seq_ = snapshot_seq_;
    auto ev = dir_ / "events.jsonl";
    if (std::filesystem::exists(ev)) {
      std::ifstream in(ev, std::ios::binary);
      std::string line;
      std::size_t line_no = 0;
      std::vector<UpdateEvent> tail;
      while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        UpdateEvent e;
        try {
          e = event_from_json(nlohmann::json::parse(line));
        } catch (const std::exception& ex) {
          throw Error(ErrorCode::io_error, "corrupt event log line " + std::to_string(line_no) +
                                               ": " + ex.what());
        }
        if (!log_.empty() && e.seq <= log_.back().seq) {
          throw Error(ErrorCode::io_error, "event log seq not increasing at line " +
                                               std::to_string(line_no));
        }
        log_.push_back(e);
        if (e.seq >= snapshot_seq_) tail.push_back(e);
      }
      records_ = replay(records_, tail);
      if (!log_.empty()) next_seq_ = std::max(next_seq_, log_.back().seq + 1);
    }
  }

  const Taxonomy* taxonomy_;
  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  std::vector<ImageRecord> records_;
  std::map<ImageId, std::size_t> index_;
  std::vector<ImageRecord> baseline_;
  std::map<ImageId, std::size_t> baseline_index_;
  std::vector<UpdateEvent> log_;
  std::map<NodeId, std::map<ImageId, PredictionRecord>> predictions_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t snapshot_seq_ = 1;
  std::uint64_t generation_ = 0;
};

}  // namespace hilab
