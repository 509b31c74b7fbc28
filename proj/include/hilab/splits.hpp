#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "hilab/common.hpp"
#include "hilab/store.hpp"
#include "hilab/taxonomy.hpp"

namespace hilab {

struct SplitRatios {
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;

  std::vector<double> as_vector() const { return {train, val, test}; }
};

struct SplitAssignment {
  ImageId image_id;
  Split split = Split::train;
  std::size_t assigned_at_depth = 0;

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

struct SplitResult {
  std::vector<SplitAssignment> assignments;  // sorted by image id
  std::vector<std::string> warnings;
};

/// Strata smaller than this go entirely to train.
inline constexpr std::size_t kMinStratumSize = 3;

/// Target per-split counts for a stratum of `n` images.
inline std::array<std::size_t, 3> stratum_targets(std::size_t n, const SplitRatios& ratios) {
  if (n < kMinStratumSize) return {n, 0, 0};
  auto counts = largest_remainder(n, ratios.as_vector());
  return {counts[0], counts[1], counts[2]};
}

/// Stratifies every live ground-truth image once, by its full label path,
/// and returns one split per image. Ancestor classifiers inherit that split,
/// so child partitions are always subsets of the parent's.
inline SplitResult assign_splits(const std::vector<ImageRecord>& records, const SplitRatios& ratios,
                                 std::uint64_t seed) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 || ratios.test < 0) {
    throw Error(ErrorCode::invalid_argument, "split ratios must be non-negative and sum to 1");
  }
  std::map<std::string, std::vector<const ImageRecord*>> strata;
  for (const auto& r : records) {
    if (r.deleted || !r.is_ground_truth() || !r.label) continue;
    strata[r.label->str()].push_back(&r);
  }
  SplitResult result;
  for (auto& [key, members] : strata) {
    std::sort(members.begin(), members.end(), [](auto* a, auto* b) { return a->id < b->id; });
    detail::Fnv1a h;
    h.add_value(seed);
    h.add(key);
    Rng rng(h.value());
    rng.shuffle(members);
    const auto targets = stratum_targets(members.size(), ratios);
    if (members.size() < kMinStratumSize) {
      result.warnings.push_back("stratum '" + key + "' has " + std::to_string(members.size()) +
                                " image(s); all assigned to train");
    }
    std::size_t i = 0;
    const std::array<Split, 3> kinds = {Split::train, Split::val, Split::test};
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t n = 0; n < targets[k]; ++n, ++i) {
        result.assignments.push_back({members[i]->id, kinds[k], members[i]->label->depth()});
      }
    }
  }
  std::sort(result.assignments.begin(), result.assignments.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return result;
}

/// Current split of every live ground-truth record, as assignments.
inline std::vector<SplitAssignment> assignments_from_records(const std::vector<ImageRecord>& records) {
  std::vector<SplitAssignment> out;
  for (const auto& r : records) {
    if (r.deleted || !r.is_ground_truth() || !r.label) continue;
    out.push_back({r.id, r.split, r.label->depth()});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return out;
}

/// node -> image -> split, for every classifier whose class the image's label supplies.
using NodeSplits = std::map<NodeId, std::map<ImageId, Split>>;

inline NodeSplits expand_to_nodes(const Taxonomy& taxonomy, const std::vector<ImageRecord>& records,
                                  const std::vector<SplitAssignment>& assignments) {
  std::map<ImageId, const ImageRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  NodeSplits out;
  const auto classifiers = taxonomy.classifier_nodes();
  for (const auto& a : assignments) {
    auto it = by_id.find(a.image_id);
    if (it == by_id.end() || !it->second->label) continue;
    for (const auto& c : classifiers) {
      if (taxonomy.class_of(*it->second->label, c)) out[c][a.image_id] = a.split;
    }
  }
  return out;
}

struct SplitViolation {
  enum class Kind { stratum_counts, containment, unlabeled_in_eval, missing };
  Kind kind;
  std::string message;
};

inline std::vector<SplitViolation> verify_consistency(const Taxonomy& taxonomy,
                                                      const std::vector<ImageRecord>& records,
                                                      const std::vector<SplitAssignment>& assignments,
                                                      const NodeSplits& node_splits,
                                                      const SplitRatios& ratios = {}) {
  std::vector<SplitViolation> out;
  std::map<ImageId, const ImageRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  std::map<ImageId, Split> assigned;
  for (const auto& a : assignments) assigned[a.image_id] = a.split;

  std::map<std::string, std::array<std::size_t, 3>> strata;
  for (const auto& a : assignments) {
    auto it = by_id.find(a.image_id);
    if (it == by_id.end()) continue;
    const auto& rec = *it->second;
    if (!rec.is_ground_truth() || !rec.label) {
      if (a.split == Split::val || a.split == Split::test) {
        out.push_back({SplitViolation::Kind::unlabeled_in_eval,
                       "image '" + rec.id + "' without ground truth assigned to " + to_string(a.split)});
      }
      continue;
    }
    if (rec.deleted) continue;
    auto& c = strata[rec.label->str()];
    if (a.split == Split::unlabeled) continue;
    ++c[static_cast<std::size_t>(a.split)];
  }
  for (const auto& r : records) {
    if (r.deleted || !r.is_ground_truth() || !r.label) continue;
    if (!assigned.count(r.id)) {
      out.push_back({SplitViolation::Kind::missing, "image '" + r.id + "' has no split assignment"});
    }
  }
  const auto ratio_vec = ratios.as_vector();
  for (const auto& [key, counts] : strata) {
    const std::size_t n = counts[0] + counts[1] + counts[2];
    bool ok = true;
    if (n < kMinStratumSize) {
      ok = counts[0] == n;
    } else {
      for (std::size_t k = 0; k < 3; ++k) {
        if (std::abs(static_cast<double>(counts[k]) - n * ratio_vec[k]) >= 1.0) ok = false;
      }
    }
    if (!ok) {
      out.push_back({SplitViolation::Kind::stratum_counts,
                     "stratum '" + key + "' counts " + std::to_string(counts[0]) + "/" +
                         std::to_string(counts[1]) + "/" + std::to_string(counts[2]) +
                         " violate the proportional contract"});
    }
  }

  for (const auto& parent : taxonomy.classifier_nodes()) {
    for (const auto& child : taxonomy.node(parent).children) {
      if (!taxonomy.node(child).trainable()) continue;
      auto cit = node_splits.find(child);
      if (cit == node_splits.end()) continue;
      auto pit = node_splits.find(parent);
      for (const auto& [image, split] : cit->second) {
        const Split* parent_split = nullptr;
        if (pit != node_splits.end()) {
          if (auto jt = pit->second.find(image); jt != pit->second.end()) parent_split = &jt->second;
        }
        if (!parent_split || *parent_split != split) {
          out.push_back({SplitViolation::Kind::containment,
                         "image '" + image + "' is " + to_string(split) + " at '" + child +
                             "' but " + (parent_split ? to_string(*parent_split) : "absent") + " at '" +
                             parent + "'"});
        }
      }
    }
  }
  return out;
}

inline std::vector<SplitViolation> verify_consistency(const Taxonomy& taxonomy,
                                                      const std::vector<ImageRecord>& records,
                                                      const std::vector<SplitAssignment>& assignments,
                                                      const SplitRatios& ratios = {}) {
  return verify_consistency(taxonomy, records, assignments,
                            expand_to_nodes(taxonomy, records, assignments), ratios);
}

}  // namespace hilab
