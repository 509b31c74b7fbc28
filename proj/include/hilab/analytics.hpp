#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hilab/common.hpp"
#include "hilab/projection.hpp"
#include "hilab/store.hpp"
#include "hilab/taxonomy.hpp"

namespace hilab::analytics {

// ---------------------------------------------------------------------------
// Dataset view

struct ClassCount {
  std::string cls;
  std::size_t ground_truth = 0;
  std::size_t pseudo = 0;
  double fraction = 0.0;  // of this node's total; not comparable across nodes
};

struct NodeSummary {
  NodeId node;
  std::string display_name;
  std::size_t total = 0;
  std::vector<ClassCount> classes;  // taxonomy child order
  std::vector<NodeSummary> children;
};

inline NodeSummary dataset_summary(const Taxonomy& taxonomy, const std::vector<ImageRecord>& records,
                                   const NodeId& node) {
  const auto& n = taxonomy.node(node);
  NodeSummary s;
  s.node = node;
  s.display_name = n.display_name;
  std::map<std::string, std::size_t> pos;
  for (const auto& c : n.children) {
    pos[c] = s.classes.size();
    s.classes.push_back({c, 0, 0, 0.0});
  }
  for (const auto& r : records) {
    if (r.deleted || !r.label) continue;
    auto cls = taxonomy.class_of(*r.label, node);
    if (!cls) continue;
    auto& cc = s.classes[pos.at(*cls)];
    if (r.label_kind == LabelKind::ground_truth) ++cc.ground_truth;
    else if (r.label_kind == LabelKind::pseudo) ++cc.pseudo;
    else continue;
    ++s.total;
  }
  for (auto& cc : s.classes) {
    cc.fraction = s.total ? static_cast<double>(cc.ground_truth + cc.pseudo) / static_cast<double>(s.total) : 0.0;
  }
  for (const auto& c : n.children) {
    if (!taxonomy.node(c).children.empty()) s.children.push_back(dataset_summary(taxonomy, records, c));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Filters view

inline constexpr std::size_t kProbabilityBins = 10;

inline std::size_t probability_bin(double p) {
  auto b = static_cast<std::size_t>(std::floor(p * static_cast<double>(kProbabilityBins)));
  return std::min(b, kProbabilityBins - 1);
}

inline double log_height(std::size_t count) { return std::log10(1.0 + static_cast<double>(count)); }

struct ProbabilityHistogram {
  std::array<std::size_t, kProbabilityBins> labeled{};
  std::array<std::size_t, kProbabilityBins> unlabeled{};

  double labeled_height(std::size_t bin) const { return log_height(labeled[bin]); }
  double unlabeled_height(std::size_t bin) const { return log_height(unlabeled[bin]); }
};

struct FilterSummary {
  std::map<std::string, std::size_t> label_bars;
  std::map<std::string, std::size_t> prediction_bars;
  std::map<std::string, std::size_t> source_bars;
  /// Keyed by predicted class; binned by top probability.
  std::map<std::string, ProbabilityHistogram> histograms;
  std::size_t total = 0;
};

inline FilterSummary filter_summary(const Taxonomy& taxonomy, const Store& store, const QueryFilter& filter) {
  const NodeId node = filter.node.value_or(taxonomy.root());
  FilterSummary out;
  for (const auto& c : taxonomy.node(node).children) {
    out.label_bars[c] = 0;
    out.prediction_bars[c] = 0;
    out.histograms[c] = {};
  }
  const auto preds = store.predictions(node);
  for (const auto& r : store.query(filter)) {
    ++out.total;
    ++out.source_bars[r.source];
    std::optional<std::string> cls;
    if (r.label && r.is_ground_truth()) cls = taxonomy.class_of(*r.label, node);
    if (cls) ++out.label_bars[*cls];
    auto it = preds.find(r.id);
    if (it == preds.end()) continue;
    const auto& p = it->second;
    ++out.prediction_bars[p.predicted_class];
    auto& h = out.histograms[p.predicted_class];
    (cls ? h.labeled : h.unlabeled)[probability_bin(p.top_probability())]++;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gallery

enum class GalleryTab { mispredicted, selected, confident, uncertain };

inline GalleryTab parse_gallery_tab(std::string_view s) {
  if (s == "mispredicted") return GalleryTab::mispredicted;
  if (s == "selected") return GalleryTab::selected;
  if (s == "confident") return GalleryTab::confident;
  if (s == "uncertain") return GalleryTab::uncertain;
  throw Error(ErrorCode::invalid_argument, "unknown gallery tab '" + std::string(s) + "'");
}

inline const char* to_string(GalleryTab t) {
  switch (t) {
    case GalleryTab::mispredicted: return "mispredicted";
    case GalleryTab::selected: return "selected";
    case GalleryTab::confident: return "confident";
    case GalleryTab::uncertain: return "uncertain";
  }
  return "mispredicted";
}

struct GalleryItem {
  ImageId image_id;
  std::optional<std::string> label_class;  // class mark at this node
  LabelKind label_kind = LabelKind::none;
  std::optional<std::string> predicted_class;
  double top_probability = 0.0;
  double margin = 0.0;
  bool marked_deleted = false;
};

struct GalleryPage {
  GalleryTab tab = GalleryTab::mispredicted;
  std::size_t total = 0;
  std::size_t page = 0;
  std::size_t page_size = 0;
  std::vector<GalleryItem> items;
};

/// Image ids whose projected coordinates fall inside the brush rectangle.
inline std::vector<ImageId> brush(const ProjectionSet& set, double x0, double y0, double x1, double y1) {
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  std::vector<ImageId> out;
  for (const auto& p : set.points) {
    if (p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1) out.push_back(p.image_id);
  }
  return out;
}

/// Full ordered result of one tab, before pagination.
inline std::vector<GalleryItem> gallery_items(const Taxonomy& taxonomy, const Store& store, const NodeId& node,
                                              GalleryTab tab, const std::vector<ImageId>* selection) {
  const auto preds = store.predictions(node);
  auto make = [&](const ImageRecord& r) {
    GalleryItem g;
    g.image_id = r.id;
    if (r.label) g.label_class = taxonomy.class_of(*r.label, node);
    g.label_kind = r.label_kind;
    g.marked_deleted = r.deleted;
    if (auto it = preds.find(r.id); it != preds.end()) {
      g.predicted_class = it->second.predicted_class;
      g.top_probability = it->second.top_probability();
      g.margin = it->second.margin;
    }
    return g;
  };
  std::vector<GalleryItem> out;
  if (tab == GalleryTab::selected) {
    if (!selection) throw Error(ErrorCode::invalid_argument, "the selected tab requires a brush selection");
    std::vector<ImageId> ids = *selection;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (const auto& id : ids) {
      if (auto r = store.get(id)) out.push_back(make(*r));
    }
    return out;
  }
  for (const auto& r : store.records()) {
    auto it = preds.find(r.id);
    if (it == preds.end()) continue;
    const auto& p = it->second;
    const auto cls = r.label ? taxonomy.class_of(*r.label, node) : std::nullopt;
    const bool labeled_here = cls && r.is_ground_truth();
    switch (tab) {
      case GalleryTab::mispredicted:
        if (labeled_here && p.predicted_class != *cls) out.push_back(make(r));
        break;
      case GalleryTab::confident:
        if (!labeled_here && p.confident) out.push_back(make(r));
        break;
      case GalleryTab::uncertain:
        if (!labeled_here && !p.confident) out.push_back(make(r));
        break;
      case GalleryTab::selected:
        break;
    }
  }
  if (tab == GalleryTab::confident) {
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.top_probability > b.top_probability; });
  } else if (tab == GalleryTab::uncertain) {
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.margin < b.margin; });
  }
  return out;
}

inline GalleryPage gallery(const Taxonomy& taxonomy, const Store& store, const NodeId& node, GalleryTab tab,
                           const std::vector<ImageId>* selection, std::size_t page, std::size_t page_size) {
  if (page_size == 0) throw Error(ErrorCode::invalid_argument, "page_size must be positive");
  auto items = gallery_items(taxonomy, store, node, tab, selection);
  GalleryPage out;
  out.tab = tab;
  out.total = items.size();
  out.page = page;
  out.page_size = page_size;
  const std::size_t start = page * page_size;
  if (start >= items.size() && !(page == 0 && items.empty())) {
    throw Error(ErrorCode::invalid_argument, "page " + std::to_string(page) + " out of range");
  }
  const std::size_t end = std::min(items.size(), start + page_size);
  for (std::size_t i = start; i < end; ++i) out.items.push_back(std::move(items[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Update summary (Sankey)

inline const std::string kUnlabeled = "unlabeled";
inline const std::string kDeleted = "deleted";

struct SankeyFlow {
  std::string from;
  std::string to;
  std::size_t count = 0;
  bool rollup = false;

  friend bool operator==(const SankeyFlow&, const SankeyFlow&) = default;
};

struct NetChange {
  ImageId image_id;
  std::string from;
  std::string to;
};

/// Net effect of a session per image: first state before the session
/// versus final state after it. Unchanged images are omitted.
inline std::vector<NetChange> net_changes(const std::vector<UpdateEvent>& events) {
  struct State {
    std::string initial;
    bool initially_deleted = false;
    std::string current;
    bool deleted = false;
  };
  std::map<ImageId, State> states;
  auto label_state = [](const std::optional<LabelPath>& label, LabelKind kind) {
    return label && kind == LabelKind::ground_truth ? label->str() : kUnlabeled;
  };
  for (const auto& e : events) {
    if (e.action != UpdateAction::relabel && e.action != UpdateAction::remove &&
        e.action != UpdateAction::restore) {
      continue;
    }
    auto [it, fresh] = states.try_emplace(e.image_id);
    auto& s = it->second;
    if (fresh) {
      s.initial = label_state(e.old_label, e.old_kind);
      s.current = s.initial;
      s.initially_deleted = e.action == UpdateAction::restore;
      s.deleted = s.initially_deleted;
    }
    switch (e.action) {
      case UpdateAction::relabel: s.current = e.new_label ? e.new_label->str() : kUnlabeled; break;
      case UpdateAction::remove: s.deleted = true; break;
      case UpdateAction::restore:
        s.deleted = false;
        s.current = label_state(e.old_label, e.old_kind);
        break;
      default: break;
    }
  }
  std::vector<NetChange> out;
  for (const auto& [id, s] : states) {
    if (s.deleted) {
      if (!s.initially_deleted) out.push_back({id, s.initial, kDeleted});
      continue;
    }
    if (s.initially_deleted) {
      out.push_back({id, kDeleted, s.current});
      continue;
    }
    if (s.current != s.initial) out.push_back({id, s.initial, s.current});
  }
  return out;
}

/// Leaf flows between full label paths, followed by ancestor rollups
/// (flagged `rollup`) for every shallower level the flow passes through.
inline std::vector<SankeyFlow> sankey(const std::vector<UpdateEvent>& session_events) {
  std::map<std::pair<std::string, std::string>, std::size_t> leaf, rolled;
  auto depth_of = [](const std::string& s) {
    return s == kUnlabeled || s == kDeleted ? std::size_t{0} : LabelPath::parse(s).depth();
  };
  auto cut = [](const std::string& s, std::size_t d) {
    if (s == kUnlabeled || s == kDeleted) return s;
    return LabelPath::parse(s).prefix(d).str();
  };
  for (const auto& c : net_changes(session_events)) {
    ++leaf[{c.from, c.to}];
    const std::size_t deepest = std::max(depth_of(c.from), depth_of(c.to));
    for (std::size_t d = 1; d < deepest; ++d) {
      auto f = cut(c.from, d), t = cut(c.to, d);
      if (f == c.from && t == c.to) continue;
      ++rolled[{f, t}];
    }
  }
  std::vector<SankeyFlow> out;
  for (const auto& [k, n] : leaf) out.push_back({k.first, k.second, n, false});
  for (const auto& [k, n] : rolled) out.push_back({k.first, k.second, n, true});
  return out;
}

}  // namespace hilab::analytics
