#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hilab/common.hpp"
#include "hilab/features.hpp"
#include "hilab/store.hpp"

namespace hilab {

using Point2 = std::array<double, 2>;

enum class ProjectionMethod { pca, tsne };

inline const char* to_string(ProjectionMethod m) { return m == ProjectionMethod::pca ? "pca" : "tsne"; }

inline ProjectionMethod parse_projection_method(std::string_view s) {
  if (s == "pca") return ProjectionMethod::pca;
  if (s == "tsne" || s == "t-sne") return ProjectionMethod::tsne;
  throw Error(ErrorCode::invalid_argument, "unknown projection method '" + std::string(s) + "'");
}

/// Row-major n x d matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != m.cols) throw Error(ErrorCode::dimension_mismatch, "ragged matrix rows");
      std::copy(rows[i].begin(), rows[i].end(), m.data.begin() + i * m.cols);
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<Point2> coords;
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> eigenvalues{};
  std::vector<std::string> warnings;
};

/// Projects mean-centered rows onto the top two eigenvectors of the sample
/// covariance (n - 1 denominator). Each component's largest-magnitude
/// loading is made positive.
inline PcaResult pca(const Matrix& x) {
  if (x.rows < 3 || x.cols < 2) {
    throw Error(ErrorCode::invalid_argument, "pca needs at least 3 rows and 2 columns");
  }
  for (double v : x.data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "pca input contains non-finite values");
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> map(
      x.data.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.cols));
  Eigen::MatrixXd centered = map.rowwise() - map.colwise().mean();
  PcaResult out;
  out.coords.assign(x.rows, Point2{0.0, 0.0});
  if (centered.cwiseAbs().maxCoeff() == 0.0) {
    out.warnings.push_back("rank-0 input: all rows identical, points placed at the origin");
    for (auto& c : out.components) c.assign(x.cols, 0.0);
    return out;
  }
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error(ErrorCode::invalid_argument, "eigendecomposition failed");
  const auto d = cov.rows();
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.components[k].assign(v.data(), v.data() + v.size());
    out.eigenvalues[k] = solver.eigenvalues()(d - 1 - k);
    Eigen::VectorXd proj = centered * v;
    for (std::size_t i = 0; i < x.rows; ++i) out.coords[i][k] = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact t-SNE

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
};

struct Affinities {
  Matrix conditional;  // row i: p(j | i)
  Matrix joint;        // (P + P^T) / 2n
  std::vector<double> betas;
};

/// Per-point precision by bisection so that H(P_i) = ln(perplexity) within
/// 1e-5, then symmetrized joint probabilities.
inline Affinities tsne_affinities(const Matrix& x, double perplexity) {
  const std::size_t n = x.rows;
  Matrix dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) {
        const double diff = x(i, k) - x(j, k);
        s += diff * diff;
      }
      dist(i, j) = dist(j, i) = s;
    }
  }
  Affinities a;
  a.conditional = Matrix(n, n);
  a.betas.assign(n, 1.0);
  const double target = std::log(perplexity);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = -std::numeric_limits<double>::infinity(),
           hi = std::numeric_limits<double>::infinity();
    double min_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) min_d = std::min(min_d, dist(i, j));
    }
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        // Shifting by the minimum distance keeps exp() from underflowing.
        row[j] = j == i ? 0.0 : std::exp(-(dist(i, j) - min_d) * beta);
        sum += row[j];
        dot += row[j] * (dist(i, j) - min_d);
      }
      const double h = std::log(sum) + beta * dot / sum;
      for (std::size_t j = 0; j < n; ++j) a.conditional(i, j) = row[j] / sum;
      const double diff = h - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = std::isinf(lo) ? beta / 2.0 : (beta + lo) / 2.0;
      }
    }
    a.betas[i] = beta;
  }
  a.joint = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      a.joint(i, j) = (a.conditional(i, j) + a.conditional(j, i)) / (2.0 * static_cast<double>(n));
    }
  }
  return a;
}

struct TsneResult {
  std::vector<Point2> coords;
  std::vector<double> kl_history;  // KL(P || Q) after each iteration, unexaggerated
};

inline TsneResult tsne(const Matrix& x, const TsneConfig& config = {}) {
  const std::size_t n = x.rows;
  if (!(config.perplexity > 0) || static_cast<double>(n) <= 3.0 * config.perplexity) {
    throw Error(ErrorCode::invalid_argument, "t-SNE needs n > 3 * perplexity (n = " + std::to_string(n) +
                                                 ", perplexity = " + std::to_string(config.perplexity) + ")");
  }
  for (double v : x.data) {
    if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "t-SNE input contains non-finite values");
  }
  auto aff = tsne_affinities(x, config.perplexity);
  auto& p = aff.joint;
  for (double& v : p.data) v = std::max(v, 1e-12);

  Rng rng(config.seed);
  std::vector<Point2> y(n), update(n, Point2{0, 0}), gains(n, Point2{1, 1}), grad(n);
  for (auto& pt : y) pt = {rng.normal() * 1e-4, rng.normal() * 1e-4};

  std::vector<double> qnum(n * n);
  TsneResult result;
  result.kl_history.reserve(config.iterations);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double exag = it < config.exaggeration_iterations ? config.exaggeration : 1.0;
    const double momentum = it < config.momentum_switch ? config.initial_momentum : config.final_momentum;
    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      qnum[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        qnum[i * n + j] = qnum[j * n + i] = q;
        qsum += 2.0 * q;
      }
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double q = qnum[i * n + j];
        const double pij = p(i, j);
        const double mult = (exag * pij - q / qsum) * q;
        gx += mult * (y[i][0] - y[j][0]);
        gy += mult * (y[i][1] - y[j][1]);
        kl += pij * std::log(pij / std::max(q / qsum, 1e-300));
      }
      grad[i] = {4.0 * gx, 4.0 * gy};
    }
    if (it > 0) result.kl_history.push_back(kl);
    for (std::size_t i = 0; i < n; ++i) {
      for (int d = 0; d < 2; ++d) {
        const bool same_sign = (grad[i][d] > 0) == (update[i][d] > 0);
        gains[i][d] = same_sign ? std::max(gains[i][d] * 0.8, 0.01) : gains[i][d] + 0.2;
        update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
        y[i][d] += update[i][d];
      }
    }
    Point2 mean{0, 0};
    for (const auto& pt : y) {
      mean[0] += pt[0] / static_cast<double>(n);
      mean[1] += pt[1] / static_cast<double>(n);
    }
    for (auto& pt : y) {
      pt[0] -= mean[0];
      pt[1] -= mean[1];
    }
  }
  // Objective of the final layout.
  {
    double qsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        qsum += 2.0 / (1.0 + dx * dx + dy * dy);
      }
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy) / qsum;
        kl += p(i, j) * std::log(p(i, j) / std::max(q, 1e-300));
      }
    }
    result.kl_history.push_back(kl);
  }
  result.coords = std::move(y);
  return result;
}

// ---------------------------------------------------------------------------
// Neighborhood hit

struct HitPoint {
  std::string id;
  Point2 pos{};
  std::string cls;  // ground truth if labeled, else predicted
  bool labeled = false;
};

/// Fraction of each point's k nearest other points (Euclidean, ties by id)
/// that share its class. Unlabeled points only look at labeled neighbors.
/// Fewer than k candidates: all are used; none: hit = 1.
inline std::vector<double> neighborhood_hit(const std::vector<HitPoint>& points, std::size_t k = 6) {
  const std::size_t n = points.size();
  std::vector<double> out(n, 1.0);
  if (k == 0) return out;
  struct Entry {
    double dist2;
    std::size_t index;
  };
  auto closer = [&points](const Entry& a, const Entry& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return points[a.index].id < points[b.index].id;
  };
  std::vector<Entry> heap;
  heap.reserve(k + 1);
  for (std::size_t i = 0; i < n; ++i) {
    // Max-heap (by closeness) of the k best candidates seen so far.
    heap.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (!points[i].labeled && !points[j].labeled) continue;
      const double dx = points[i].pos[0] - points[j].pos[0];
      const double dy = points[i].pos[1] - points[j].pos[1];
      Entry e{dx * dx + dy * dy, j};
      if (heap.size() < k) {
        heap.push_back(e);
        std::push_heap(heap.begin(), heap.end(), closer);
      } else if (closer(e, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), closer);
        heap.back() = e;
        std::push_heap(heap.begin(), heap.end(), closer);
      }
    }
    if (heap.empty()) continue;
    std::size_t same = 0;
    for (const auto& e : heap) {
      if (points[e.index].cls == points[i].cls) ++same;
    }
    out[i] = static_cast<double>(same) / static_cast<double>(heap.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection sets and their on-disk cache

struct ProjectionPoint {
  ImageId image_id;
  float x = 0.f;
  float y = 0.f;
  float neighborhood_hit = 1.f;

  friend bool operator==(const ProjectionPoint&, const ProjectionPoint&) = default;
};

struct ProjectionKey {
  NodeId node;
  Subset subset = Subset::all;
  ProjectionMethod method = ProjectionMethod::pca;
  std::uint64_t seed = 0;
  std::uint64_t store_version = 0;
  std::uint64_t feature_fingerprint = 0;
  double perplexity = 30.0;
  std::size_t nh_k = 6;

  std::uint64_t hash() const {
    detail::Fnv1a h;
    h.add(node);
    h.add_value<int>(static_cast<int>(subset));
    h.add_value<int>(static_cast<int>(method));
    h.add_value(seed);
    h.add_value(store_version);
    h.add_value(feature_fingerprint);
    h.add_value(perplexity);
    h.add_value<std::uint64_t>(nh_k);
    return h.value();
  }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }
};

struct ProjectionSet {
  NodeId node;
  Subset subset = Subset::all;
  ProjectionMethod method = ProjectionMethod::pca;
  std::uint64_t seed = 0;
  std::vector<ProjectionPoint> points;  // sorted by image id
  std::vector<std::string> warnings;

  const ProjectionPoint* find(const ImageId& id) const {
    auto it = std::lower_bound(points.begin(), points.end(), id,
                               [](const ProjectionPoint& p, const ImageId& v) { return p.image_id < v; });
    return it != points.end() && it->image_id == id ? &*it : nullptr;
  }
};

// "HLPJ" | node (u16 len + bytes) | subset u8 | method u8 | seed u64 | n u64 |
// n rows of (u16 id len, id bytes, x f32, y f32, hit f32)
inline std::vector<std::uint8_t> encode_projection(const ProjectionSet& s) {
  std::vector<std::uint8_t> out = {'H', 'L', 'P', 'J'};
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.node.size()));
  out.insert(out.end(), s.node.begin(), s.node.end());
  out.push_back(static_cast<std::uint8_t>(s.subset));
  out.push_back(static_cast<std::uint8_t>(s.method));
  detail::put_le<std::uint64_t>(out, s.seed);
  detail::put_le<std::uint64_t>(out, s.points.size());
  for (const auto& p : s.points) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(p.image_id.size()));
    out.insert(out.end(), p.image_id.begin(), p.image_id.end());
    detail::put_f32(out, p.x);
    detail::put_f32(out, p.y);
    detail::put_f32(out, p.neighborhood_hit);
  }
  return out;
}

inline ProjectionSet decode_projection(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes);
  if (rd.str(4) != "HLPJ") throw Error(ErrorCode::decode_error, "bad projection cache magic");
  ProjectionSet s;
  s.node = rd.str(rd.le<std::uint16_t>());
  s.subset = static_cast<Subset>(rd.le<std::uint8_t>());
  s.method = static_cast<ProjectionMethod>(rd.le<std::uint8_t>());
  s.seed = rd.le<std::uint64_t>();
  const auto n = rd.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    ProjectionPoint p;
    p.image_id = rd.str(rd.le<std::uint16_t>());
    p.x = rd.f32();
    p.y = rd.f32();
    p.neighborhood_hit = rd.f32();
    s.points.push_back(std::move(p));
  }
  return s;
}

}  // namespace hilab
