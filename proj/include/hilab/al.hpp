#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hilab/common.hpp"
#include "hilab/store.hpp"

namespace hilab {

struct ALConfig {
  /// Entropy threshold in nats; a prediction is confident iff entropy < delta.
  double delta = 0.05;
  /// Pool changes (additions, removals, label changes) that trigger a retrain.
  std::size_t retrain_increment = 50;
  std::size_t max_uncertain_page = 100;

  void validate() const {
    // delta = 0 is accepted and disables pseudo-labeling (entropy is never < 0).
    if (!(delta >= 0.0)) throw Error(ErrorCode::invalid_argument, "delta must be >= 0");
    if (retrain_increment < 1) throw Error(ErrorCode::invalid_argument, "retrain_increment must be >= 1");
  }
};

namespace detail {

inline void check_distribution(std::span<const double> probs) {
  if (probs.empty()) throw Error(ErrorCode::invalid_argument, "empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw Error(ErrorCode::invalid_argument, "negative or NaN probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorCode::invalid_argument, "probabilities sum to " + std::to_string(sum));
  }
}

}  // namespace detail

/// Shannon entropy in nats, with 0 ln 0 = 0.
inline double entropy(std::span<const double> probs) {
  detail::check_distribution(probs);
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Gap between the two largest probabilities; small means uncertain.
inline double margin(std::span<const double> probs) {
  if (probs.size() < 2) throw Error(ErrorCode::invalid_argument, "margin needs at least two classes");
  detail::check_distribution(probs);
  double first = -1.0, second = -1.0;
  for (double p : probs) {
    if (p > first) {
      second = first;
      first = p;
    } else if (p > second) {
      second = p;
    }
  }
  return first - second;
}

inline PredictionRecord make_prediction(const ImageId& id, const NodeId& node, std::uint32_t version,
                                        const std::vector<std::string>& classes, std::vector<double> probs,
                                        double delta) {
  PredictionRecord p;
  p.image_id = id;
  p.node = node;
  p.model_version = version;
  p.entropy = entropy(probs);
  p.margin = margin(probs);
  p.confident = p.entropy < delta;
  p.predicted_class =
      classes[static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin())];
  p.probs = std::move(probs);
  return p;
}

struct Partition {
  std::vector<PredictionRecord> confident;  // sorted by image id
  std::vector<PredictionRecord> uncertain;  // ascending margin, then image id
};

inline Partition partition(std::vector<PredictionRecord> predictions, const ALConfig& config) {
  Partition out;
  for (auto& p : predictions) {
    const bool confident = p.entropy < config.delta;
    (confident ? out.confident : out.uncertain).push_back(std::move(p));
  }
  std::sort(out.confident.begin(), out.confident.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  std::sort(out.uncertain.begin(), out.uncertain.end(), [](const auto& a, const auto& b) {
    if (a.margin != b.margin) return a.margin < b.margin;
    return a.image_id < b.image_id;
  });
  return out;
}

/// image -> class for one classifier's training pool.
using TrainingPool = std::map<ImageId, std::string>;

/// |current Δ previous|, where a changed class counts once.
inline std::size_t pool_delta(const TrainingPool& current, const TrainingPool& previous) {
  std::size_t changes = 0;
  auto a = current.begin();
  auto b = previous.begin();
  while (a != current.end() || b != previous.end()) {
    if (b == previous.end() || (a != current.end() && a->first < b->first)) {
      ++changes;
      ++a;
    } else if (a == current.end() || b->first < a->first) {
      ++changes;
      ++b;
    } else {
      if (a->second != b->second) ++changes;
      ++a;
      ++b;
    }
  }
  return changes;
}

struct ALReport {
  NodeId node;
  std::size_t scored = 0;
  std::size_t promoted = 0;
  std::size_t revoked = 0;
  std::size_t confident_count = 0;
  std::size_t uncertain_count = 0;
  std::size_t pool_changes = 0;
  bool retrained = false;
  std::optional<std::uint32_t> model_version;
  std::optional<double> new_macro_f1;
  std::vector<ImageId> top_uncertain;
  std::vector<std::string> notices;
};

}  // namespace hilab
