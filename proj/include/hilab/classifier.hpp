#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hilab/common.hpp"
#include "hilab/features.hpp"
#include "hilab/taxonomy.hpp"

namespace hilab {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
};

struct Metrics {
  std::vector<double> per_class_f1;
  double macro_f1 = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;
};

/// Labeled feature rows for one classifier; `labels[i]` indexes the
/// node's children in taxonomy order.
struct LabeledSet {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  void add(std::string id, std::vector<double> x, std::size_t y) {
    ids.push_back(std::move(id));
    features.push_back(std::move(x));
    labels.push_back(y);
  }
};

/// Multinomial logistic regression over feature vectors.
struct Model {
  NodeId node;
  std::vector<std::string> classes;
  std::size_t dim = 0;
  std::vector<double> weights;  // classes x dim, row-major
  std::vector<double> bias;
  std::uint32_t version = 0;
  std::size_t trained_on = 0;
  FeatureKind feature_kind = FeatureKind::external;
  std::vector<double> per_class_f1;
  double macro_f1 = 0.0;

  std::size_t num_classes() const { return classes.size(); }
  double w(std::size_t c, std::size_t d) const { return weights[c * dim + d]; }
  double& w(std::size_t c, std::size_t d) { return weights[c * dim + d]; }

  static Model zeros(NodeId node, std::vector<std::string> classes, std::size_t dim) {
    Model m;
    m.node = std::move(node);
    m.classes = std::move(classes);
    m.dim = dim;
    m.weights.assign(m.classes.size() * dim, 0.0);
    m.bias.assign(m.classes.size(), 0.0);
    return m;
  }
};

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

inline std::vector<double> logits(const Model& m, std::span<const double> x) {
  if (x.size() != m.dim) {
    throw Error(ErrorCode::dimension_mismatch, "feature dimension " + std::to_string(x.size()) +
                                                   " does not match model dimension " +
                                                   std::to_string(m.dim));
  }
  std::vector<double> z(m.num_classes());
  for (std::size_t c = 0; c < z.size(); ++c) {
    double acc = m.bias[c];
    const double* row = &m.weights[c * m.dim];
    for (std::size_t d = 0; d < m.dim; ++d) acc += row[d] * x[d];
    z[c] = acc;
  }
  return z;
}

inline std::vector<double> predict(const Model& m, std::span<const double> x) {
  auto z = logits(m, x);
  return softmax(z);
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct LossGradient {
  double loss = 0.0;
  std::vector<double> grad_weights;
  std::vector<double> grad_bias;
};

/// Mean softmax cross-entropy over `rows` of `data` and its gradient.
inline LossGradient loss_and_gradient(const Model& m, const LabeledSet& data,
                                      std::span<const std::size_t> rows) {
  LossGradient g;
  g.grad_weights.assign(m.weights.size(), 0.0);
  g.grad_bias.assign(m.bias.size(), 0.0);
  if (rows.empty()) return g;
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    const auto& x = data.features[r];
    auto p = predict(m, x);
    const std::size_t y = data.labels[r];
    g.loss -= std::log(std::max(p[y], std::numeric_limits<double>::min())) * scale;
    for (std::size_t c = 0; c < p.size(); ++c) {
      const double delta = (p[c] - (c == y ? 1.0 : 0.0)) * scale;
      g.grad_bias[c] += delta;
      double* grow = &g.grad_weights[c * m.dim];
      for (std::size_t d = 0; d < m.dim; ++d) grow[d] += delta * x[d];
    }
  }
  return g;
}

inline double mean_loss(const Model& m, const LabeledSet& data) {
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return loss_and_gradient(m, data, rows).loss;
}

/// Per-class F1 = 2PR / (P + R), 0 when P + R = 0; macro = unweighted mean.
inline Metrics metrics_from_predictions(std::size_t num_classes, std::span<const std::size_t> truth,
                                        std::span<const std::size_t> predicted) {
  Metrics out;
  out.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) ++out.confusion[truth[i]][predicted[i]];
  out.per_class_f1.assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double tp = static_cast<double>(out.confusion[c][c]);
    double fp = 0, fn = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (k == c) continue;
      fp += static_cast<double>(out.confusion[k][c]);
      fn += static_cast<double>(out.confusion[c][k]);
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    out.per_class_f1[c] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  double sum = 0.0;
  for (double f : out.per_class_f1) sum += f;
  out.macro_f1 = num_classes ? sum / static_cast<double>(num_classes) : 0.0;
  return out;
}

inline Metrics evaluate(const Model& m, const LabeledSet& data) {
  if (data.empty()) throw Error(ErrorCode::invalid_argument, "cannot evaluate on an empty set");
  std::vector<std::size_t> predicted;
  predicted.reserve(data.size());
  for (const auto& x : data.features) predicted.push_back(argmax(predict(m, x)));
  return metrics_from_predictions(m.num_classes(), data.labels, predicted);
}

struct TrainResult {
  Model model;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_macro_f1 = 0.0;
  std::optional<Metrics> test_metrics;
};

/// Mini-batch gradient descent on softmax cross-entropy with early stopping
/// on validation macro-F1 (validation loss breaks ties). Returns the weights
/// of the best validation epoch.
inline TrainResult train_softmax(const NodeId& node, const std::vector<std::string>& classes,
                                 const LabeledSet& train, const LabeledSet& val, const LabeledSet& test,
                                 const TrainConfig& config, FeatureKind kind = FeatureKind::external) {
  if (classes.size() < 2) {
    throw Error(ErrorCode::training_refused, "node '" + node + "' has fewer than two classes");
  }
  if (train.empty()) throw Error(ErrorCode::training_refused, "empty training pool for '" + node + "'");
  if (val.empty()) throw Error(ErrorCode::training_refused, "empty validation pool for '" + node + "'");
  std::vector<std::size_t> per_class(classes.size(), 0);
  for (auto y : train.labels) {
    if (y >= classes.size()) throw Error(ErrorCode::invalid_argument, "label index out of range");
    ++per_class[y];
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (per_class[c] == 0) {
      throw Error(ErrorCode::training_refused,
                  "class '" + classes[c] + "' of node '" + node + "' has no training samples");
    }
  }
  const std::size_t dim = train.features.front().size();
  auto check_dims = [&](const LabeledSet& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.features[i].size() != dim) {
        throw Error(ErrorCode::dimension_mismatch, "inconsistent feature dimension for '" + s.ids[i] + "'");
      }
    }
  };
  check_dims(train);
  check_dims(val);
  check_dims(test);
  if (config.batch_size == 0) throw Error(ErrorCode::invalid_argument, "batch size must be positive");

  Model model = Model::zeros(node, classes, dim);
  model.feature_kind = kind;
  Model best = model;
  double best_f1 = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;

  Rng rng(config.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      auto g = loss_and_gradient(model, train, std::span(order).subspan(start, end - start));
      for (std::size_t k = 0; k < model.weights.size(); ++k) {
        model.weights[k] -= config.learning_rate * g.grad_weights[k];
      }
      for (std::size_t k = 0; k < model.bias.size(); ++k) {
        model.bias[k] -= config.learning_rate * g.grad_bias[k];
      }
    }
    result.epochs_run = epoch;
    const double f1 = evaluate(model, val).macro_f1;
    const double loss = mean_loss(model, val);
    if (f1 > best_f1 || (f1 == best_f1 && loss < best_loss)) {
      best_f1 = f1;
      best_loss = loss;
      best = model;
      result.best_epoch = epoch;
      since_improvement = 0;
    } else if (++since_improvement >= config.patience) {
      break;
    }
  }
  best.trained_on = train.size();
  result.best_val_macro_f1 = best_f1;
  if (!test.empty()) {
    auto m = evaluate(best, test);
    best.per_class_f1 = m.per_class_f1;
    best.macro_f1 = m.macro_f1;
    result.test_metrics = std::move(m);
  } else {
    best.per_class_f1.assign(classes.size(), 0.0);
    best.macro_f1 = 0.0;
  }
  result.model = std::move(best);
  return result;
}

// ---------------------------------------------------------------------------
// Saliency: linear back-projection of weight x feature onto the 8x8 grid.

struct Heatmap {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  std::array<double, kGridCells> grid{};

  double at(std::uint32_t x, std::uint32_t y) const { return values[std::size_t(y) * width + x]; }
};

inline Heatmap saliency(const Model& m, std::span<const double> features, std::uint32_t width,
                        std::uint32_t height, std::size_t class_index) {
  if (m.feature_kind != FeatureKind::builtin || m.dim != kBuiltinDim) {
    throw Error(ErrorCode::unavailable,
                "saliency unavailable: model '" + m.node + "' was trained on external features");
  }
  if (features.size() != m.dim) throw Error(ErrorCode::dimension_mismatch, "feature dimension mismatch");
  if (class_index >= m.num_classes()) throw Error(ErrorCode::invalid_argument, "class index out of range");
  if (width == 0 || height == 0) throw Error(ErrorCode::invalid_argument, "empty image");
  Heatmap h;
  h.width = width;
  h.height = height;
  double histogram_share = 0.0;
  for (std::size_t d = kGridCells; d < m.dim; ++d) histogram_share += m.w(class_index, d) * features[d];
  histogram_share /= static_cast<double>(kGridCells);
  for (std::size_t cell = 0; cell < kGridCells; ++cell) {
    h.grid[cell] = m.w(class_index, cell) * features[cell] + histogram_share;
  }
  const auto [lo_it, hi_it] = std::minmax_element(h.grid.begin(), h.grid.end());
  const double lo = *lo_it, hi = *hi_it;
  for (double& v : h.grid) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  h.values.resize(std::size_t(width) * height);
  for (std::uint32_t y = 0; y < height; ++y) {
    const std::size_t r = std::size_t(y) * kGridSide / height;
    for (std::uint32_t x = 0; x < width; ++x) {
      const std::size_t c = std::size_t(x) * kGridSide / width;
      h.values[std::size_t(y) * width + x] = h.grid[r * kGridSide + c];
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Model file: "HLMD" | node (u16 len + bytes) | version u32 | C u32 | D u32 |
// C class ids (u16 len + bytes) | C*D float32 weights | C float32 bias |
// feature kind u8 | trained_on u64 | C float32 per-class F1 | float32 macro F1.

inline std::vector<std::uint8_t> encode_model(const Model& m) {
  std::vector<std::uint8_t> out = {'H', 'L', 'M', 'D'};
  auto put_str = [&](const std::string& s) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  };
  put_str(m.node);
  detail::put_le<std::uint32_t>(out, m.version);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.num_classes()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim));
  for (const auto& c : m.classes) put_str(c);
  for (double w : m.weights) detail::put_f32(out, static_cast<float>(w));
  for (double b : m.bias) detail::put_f32(out, static_cast<float>(b));
  out.push_back(m.feature_kind == FeatureKind::builtin ? 1 : 0);
  detail::put_le<std::uint64_t>(out, m.trained_on);
  for (std::size_t c = 0; c < m.num_classes(); ++c) {
    detail::put_f32(out, static_cast<float>(c < m.per_class_f1.size() ? m.per_class_f1[c] : 0.0));
  }
  detail::put_f32(out, static_cast<float>(m.macro_f1));
  return out;
}

inline Model decode_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes);
  if (rd.str(4) != "HLMD") throw Error(ErrorCode::decode_error, "bad model file magic");
  Model m;
  m.node = rd.str(rd.le<std::uint16_t>());
  m.version = rd.le<std::uint32_t>();
  const auto c = rd.le<std::uint32_t>();
  m.dim = rd.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < c; ++i) m.classes.push_back(rd.str(rd.le<std::uint16_t>()));
  m.weights.resize(std::size_t(c) * m.dim);
  for (auto& w : m.weights) w = rd.f32();
  m.bias.resize(c);
  for (auto& b : m.bias) b = rd.f32();
  m.feature_kind = rd.le<std::uint8_t>() ? FeatureKind::builtin : FeatureKind::external;
  m.trained_on = rd.le<std::uint64_t>();
  m.per_class_f1.resize(c);
  for (auto& f : m.per_class_f1) f = rd.f32();
  m.macro_f1 = rd.f32();
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  auto bytes = encode_model(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_error, "cannot write model " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return decode_model(bytes);
}

}  // namespace hilab
