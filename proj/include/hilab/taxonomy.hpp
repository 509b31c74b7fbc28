#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hilab/common.hpp"

namespace hilab {

using NodeId = std::string;

/// Dot-separated path into the taxonomy, excluding the root. May stop above
/// the leaves ("microscopy" is a valid, incomplete label).
class LabelPath {
 public:
  LabelPath() = default;
  explicit LabelPath(std::vector<std::string> segments) : segments_(std::move(segments)) {}

  static LabelPath parse(std::string_view text) {
    if (text.empty()) return LabelPath{};
    return LabelPath(detail::split(text, '.'));
  }

  const std::vector<std::string>& segments() const { return segments_; }
  std::size_t depth() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }
  const std::string& leaf() const { return segments_.back(); }

  std::string str() const { return detail::join(segments_, '.'); }

  LabelPath prefix(std::size_t n) const {
    return LabelPath({segments_.begin(), segments_.begin() + std::min(n, segments_.size())});
  }

  LabelPath child(const std::string& segment) const {
    auto s = segments_;
    s.push_back(segment);
    return LabelPath(std::move(s));
  }

  bool starts_with(const LabelPath& other) const {
    if (other.depth() > depth()) return false;
    return std::equal(other.segments_.begin(), other.segments_.end(), segments_.begin());
  }

  friend bool operator==(const LabelPath&, const LabelPath&) = default;
  friend auto operator<=>(const LabelPath&, const LabelPath&) = default;

 private:
  std::vector<std::string> segments_;
};

struct ClassifierState {
  std::uint32_t model_version = 0;
  std::map<std::string, double> per_class_f1;
  double macro_f1 = 0.0;
  std::size_t training_pool_size_at_last_train = 0;
};

struct TaxonomyNode {
  NodeId id;
  std::string display_name;
  std::optional<NodeId> parent;
  std::vector<NodeId> children;
  std::optional<ClassifierState> classifier_state;

  bool trainable() const { return children.size() >= 2; }
};

struct LabelInfo {
  std::size_t depth = 0;
  std::optional<NodeId> deepest_classifier;
};

inline bool is_node_token(std::string_view id) {
  if (id.empty()) return false;
  for (char c : id) {
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_')) return false;
  }
  return true;
}

/// Immutable tree of classes. Every node with at least two children owns an
/// independent classifier over those children.
class Taxonomy {
 public:
  struct Entry {
    NodeId id;
    std::optional<NodeId> parent;
    std::string display_name;
  };

  static Taxonomy from_entries(const std::vector<Entry>& entries) {
    Taxonomy t;
    std::optional<NodeId> root;
    for (const auto& e : entries) {
      if (!is_node_token(e.id)) {
        throw Error(ErrorCode::invalid_taxonomy, "invalid node id '" + e.id + "'");
      }
      if (t.index_.count(e.id)) {
        throw Error(ErrorCode::invalid_taxonomy, "duplicate node id '" + e.id + "'");
      }
      if (!e.parent) {
        if (root) {
          throw Error(ErrorCode::invalid_taxonomy,
                      "multiple roots: '" + *root + "' and '" + e.id + "'");
        }
        root = e.id;
      }
      t.index_[e.id] = t.nodes_.size();
      t.nodes_.push_back(TaxonomyNode{e.id, e.display_name, e.parent, {}, std::nullopt});
    }
    if (entries.empty()) throw Error(ErrorCode::invalid_taxonomy, "empty taxonomy");
    for (auto& n : t.nodes_) {
      if (!n.parent) continue;
      auto it = t.index_.find(*n.parent);
      if (it == t.index_.end()) {
        throw Error(ErrorCode::invalid_taxonomy,
                    "node '" + n.id + "' has dangling parent '" + *n.parent + "'");
      }
      t.nodes_[it->second].children.push_back(n.id);
    }
    if (!root) {
      throw Error(ErrorCode::invalid_taxonomy, "cycle: no root node (at '" + entries[0].id + "')");
    }
    t.root_ = *root;
    // Every node must reach the root; otherwise it sits on a cycle.
    for (const auto& n : t.nodes_) {
      std::size_t steps = 0;
      const TaxonomyNode* cur = &n;
      while (cur->parent) {
        cur = &t.nodes_[t.index_.at(*cur->parent)];
        if (++steps > t.nodes_.size()) {
          throw Error(ErrorCode::invalid_taxonomy, "cycle through node '" + n.id + "'");
        }
      }
    }
    for (auto& n : t.nodes_) {
      if (n.trainable()) n.classifier_state = ClassifierState{};
      t.paths_[n.id] = t.compute_path(n.id);
    }
    return t;
  }

  /// Line format: `id<TAB>parent_or_dash<TAB>display name`. Blank lines and
  /// lines starting with '#' are ignored.
  static Taxonomy parse(std::string_view text) {
    std::vector<Entry> entries;
    std::size_t line_no = 0;
    for (const auto& raw : detail::split(text, '\n')) {
      ++line_no;
      std::string line = raw;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::trim(line).empty() || line[0] == '#') continue;
      auto cols = detail::split(line, '\t');
      if (cols.size() < 2) {
        throw Error(ErrorCode::invalid_taxonomy,
                    "line " + std::to_string(line_no) + ": expected id<TAB>parent<TAB>name");
      }
      Entry e;
      e.id = cols[0];
      if (cols[1] != "-") e.parent = cols[1];
      e.display_name = cols.size() > 2 ? cols[2] : cols[0];
      entries.push_back(std::move(e));
    }
    return from_entries(entries);
  }

  static Taxonomy load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot read taxonomy file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string serialize() const {
    std::string out;
    // Parents before children so the output reads top-down.
    std::vector<NodeId> order;
    collect_preorder(root_, order);
    for (const auto& id : order) {
      const auto& n = node(id);
      out += n.id + "\t" + (n.parent ? *n.parent : "-") + "\t" + n.display_name + "\n";
    }
    return out;
  }

  const NodeId& root() const { return root_; }
  bool contains(const NodeId& id) const { return index_.count(id) > 0; }
  const TaxonomyNode& node(const NodeId& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::not_found, "unknown taxonomy node '" + id + "'");
    return nodes_[it->second];
  }
  TaxonomyNode& mutable_node(const NodeId& id) {
    return const_cast<TaxonomyNode&>(std::as_const(*this).node(id));
  }
  const std::vector<TaxonomyNode>& nodes() const { return nodes_; }

  /// Path of a node from the root (empty for the root itself).
  const LabelPath& path_of(const NodeId& id) const {
    auto it = paths_.find(id);
    if (it == paths_.end()) throw Error(ErrorCode::not_found, "unknown taxonomy node '" + id + "'");
    return it->second;
  }

  /// Trainable nodes in pre-order (parents before children).
  std::vector<NodeId> classifier_nodes() const {
    std::vector<NodeId> order, out;
    collect_preorder(root_, order);
    for (const auto& id : order) {
      if (node(id).trainable()) out.push_back(id);
    }
    return out;
  }

  /// Node addressed by a label path (the path's last segment).
  const TaxonomyNode& node_at(const LabelPath& path) const {
    if (path.empty()) return node(root_);
    return node(path.leaf());
  }

  LabelInfo validate_label(const LabelPath& path) const {
    if (path.empty()) throw Error(ErrorCode::invalid_label, "empty label");
    const TaxonomyNode* cur = &node(root_);
    for (std::size_t i = 0; i < path.depth(); ++i) {
      const auto& seg = path.segments()[i];
      if (std::find(cur->children.begin(), cur->children.end(), seg) == cur->children.end()) {
        throw Error(ErrorCode::invalid_label, "invalid label '" + path.str() + "': segment " +
                                                  std::to_string(i + 1) + " '" + seg +
                                                  "' does not resolve");
      }
      cur = &node(seg);
    }
    LabelInfo info;
    info.depth = path.depth();
    // The deepest classifier is the one whose class is the label's last segment.
    const auto& parent = node(path.leaf()).parent;
    if (parent && node(*parent).trainable()) info.deepest_classifier = *parent;
    return info;
  }

  bool is_valid_label(const LabelPath& path) const {
    try {
      validate_label(path);
      return true;
    } catch (const Error&) {
      return false;
    }
  }

  /// Class the label supplies to `classifier`, or nullopt when the label does
  /// not descend strictly through that node.
  std::optional<std::string> class_of(const LabelPath& path, const NodeId& classifier) const {
    const auto& prefix = path_of(classifier);
    if (path.depth() <= prefix.depth() || !path.starts_with(prefix)) return std::nullopt;
    return path.segments()[prefix.depth()];
  }

  /// Index of `cls` within the children of `classifier`.
  std::optional<std::size_t> class_index(const NodeId& classifier, const std::string& cls) const {
    const auto& ch = node(classifier).children;
    auto it = std::find(ch.begin(), ch.end(), cls);
    if (it == ch.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ch.begin());
  }

 private:
  LabelPath compute_path(const NodeId& id) const {
    std::vector<std::string> rev;
    const TaxonomyNode* cur = &node(id);
    while (cur->parent) {
      rev.push_back(cur->id);
      cur = &node(*cur->parent);
    }
    return LabelPath({rev.rbegin(), rev.rend()});
  }

  void collect_preorder(const NodeId& id, std::vector<NodeId>& out) const {
    out.push_back(id);
    for (const auto& c : node(id).children) collect_preorder(c, out);
  }

  std::vector<TaxonomyNode> nodes_;
  std::unordered_map<NodeId, std::size_t> index_;
  std::unordered_map<NodeId, LabelPath> paths_;
  NodeId root_;
};

}  // namespace hilab
