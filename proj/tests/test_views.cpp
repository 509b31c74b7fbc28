#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "support.hpp"

using namespace hilab;
using hilab::test::fixture_taxonomy;
using hilab::test::row;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected hilab::Error";
  return ErrorCode::io_error;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Sample covariance via plain loops, n - 1 denominator.
std::vector<std::vector<double>> covariance(const Matrix& x) {
  std::vector<double> mean(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) mean[j] += x(i, j) / x.rows;
  std::vector<std::vector<double>> c(x.cols, std::vector<double>(x.cols, 0.0));
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t a = 0; a < x.cols; ++a)
      for (std::size_t b = 0; b < x.cols; ++b) c[a][b] += (x(i, a) - mean[a]) * (x(i, b) - mean[b]) / (x.rows - 1);
  return c;
}

// Top eigenvalue by power iteration, then deflation for the second.
std::array<double, 2> top_two_eigenvalues(std::vector<std::vector<double>> c) {
  std::array<double, 2> out{};
  const std::size_t d = c.size();
  for (int k = 0; k < 2; ++k) {
    std::vector<double> v(d, 1.0);
    for (std::size_t i = 0; i < d; ++i) v[i] += 0.01 * i;
    double lambda = 0;
    for (int it = 0; it < 5000; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) w[a] += c[a][b] * v[b];
      double n = 0;
      for (double q : w) n += q * q;
      n = std::sqrt(n);
      if (n == 0) break;
      for (std::size_t a = 0; a < d; ++a) v[a] = w[a] / n;
      lambda = n;
    }
    out[k] = lambda;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) c[a][b] -= lambda * v[a] * v[b];
  }
  return out;
}

double variance(const std::vector<Point2>& pts, int axis) {
  double m = 0;
  for (const auto& p : pts) m += p[axis];
  m /= pts.size();
  double s = 0;
  for (const auto& p : pts) s += (p[axis] - m) * (p[axis] - m);
  return s / (pts.size() - 1);
}

Matrix anisotropic(std::size_t n, Rng& rng) {
  Matrix x(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    x.data[i * 3 + 0] = 10 * rng.normal();
    x.data[i * 3 + 1] = rng.normal();
    x.data[i * 3 + 2] = rng.normal();
  }
  return x;
}

Matrix clusters(std::size_t per, double sep, Rng& rng, std::vector<int>* ids) {
  Matrix x(3 * per, 5);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t r = c * per + i;
      for (std::size_t d = 0; d < 5; ++d) x.data[r * 5 + d] = rng.normal() + (d == c ? sep : 0.0);
      if (ids) ids->push_back(static_cast<int>(c));
    }
  }
  return x;
}

double silhouette(const std::vector<Point2>& pts, const std::vector<int>& ids) {
  const std::size_t n = pts.size();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, std::pair<double, std::size_t>> acc;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]);
      acc[ids[j]].first += d;
      acc[ids[j]].second++;
    }
    const double a = acc[ids[i]].first / acc[ids[i]].second;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [c, v] : acc) {
      if (c != ids[i]) b = std::min(b, v.first / v.second);
    }
    total += (b - a) / std::max(a, b);
  }
  return total / n;
}

}  // namespace

// ---------------------------------------------------------------------------
// PCA

TEST(Pca, LineReproducesSignedDistances) {
  Matrix x(6, 2);
  const double ts[] = {-3, -1, 0, 0.5, 2, 4};
  for (int i = 0; i < 6; ++i) {
    x.data[i * 2] = ts[i];
    x.data[i * 2 + 1] = 2 * ts[i];
  }
  auto r = pca(x);
  const double mean_t = (-3 - 1 + 0 + 0.5 + 2 + 4) / 6.0;
  for (int i = 0; i < 6; ++i) {
    // Direction (1, 2) / sqrt(5); its largest loading is positive.
    EXPECT_NEAR(r.coords[i][0], (ts[i] - mean_t) * std::sqrt(5.0), 1e-9);
    EXPECT_LT(std::abs(r.coords[i][1]), 1e-9);
  }
  EXPECT_GT(r.components[0][1], 0.0);
}

TEST(Pca, AnisotropicGaussianAxisAndVariances) {
  Rng rng(21);
  auto x = anisotropic(500, rng);
  auto r = pca(x);
  const double cos_angle = std::abs(r.components[0][0]);
  EXPECT_LT(std::acos(std::min(1.0, cos_angle)) * 180 / M_PI, 5.0);
  const auto ev = top_two_eigenvalues(covariance(x));
  EXPECT_NEAR(r.eigenvalues[0], ev[0], 1e-6 * ev[0]);
  EXPECT_NEAR(r.eigenvalues[1], ev[1], 1e-6 * ev[1]);
  EXPECT_NEAR(variance(r.coords, 0), ev[0], 1e-6 * ev[0]);
  EXPECT_NEAR(variance(r.coords, 1), ev[1], 1e-6 * ev[1]);
  EXPECT_GE(variance(r.coords, 0), variance(r.coords, 1));
}

TEST(Pca, ComponentsOrthonormalAndSignConvention) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(40), d = 2 + rng.below(8);
    Matrix x(n, d);
    for (auto& v : x.data) v = rng.normal() * (1 + rng.below(5));
    auto r = pca(x);
    const auto& c = r.components;
    double n0 = 0, n1 = 0, dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      n0 += c[0][j] * c[0][j];
      n1 += c[1][j] * c[1][j];
      dot += c[0][j] * c[1][j];
    }
    EXPECT_NEAR(n0, 1.0, 1e-9);
    EXPECT_NEAR(n1, 1.0, 1e-9);
    EXPECT_NEAR(dot, 0.0, 1e-9);
    for (int k = 0; k < 2; ++k) {
      auto it = std::max_element(c[k].begin(), c[k].end(),
                                 [](double a, double b) { return std::abs(a) < std::abs(b); });
      EXPECT_GT(*it, 0.0);
    }
    EXPECT_GE(r.eigenvalues[0], r.eigenvalues[1]);
  }
}

TEST(Pca, DuplicateRowsAndDegenerateInput) {
  Rng rng(8);
  auto x = anisotropic(10, rng);
  for (std::size_t j = 0; j < 3; ++j) x.data[9 * 3 + j] = x.data[2 * 3 + j];
  auto r = pca(x);
  EXPECT_EQ(r.coords[9], r.coords[2]);

  Matrix same(4, 3);
  for (auto& v : same.data) v = 7.0;
  auto z = pca(same);
  EXPECT_FALSE(z.warnings.empty());
  for (const auto& p : z.coords) EXPECT_EQ(p, (Point2{0.0, 0.0}));

  EXPECT_EQ(code_of([] { pca(Matrix(2, 3)); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { pca(Matrix(5, 1)); }), ErrorCode::invalid_argument);
  Matrix bad(4, 2);
  bad.data[3] = std::nan("");
  EXPECT_EQ(code_of([&] { pca(bad); }), ErrorCode::invalid_argument);
}

// ---------------------------------------------------------------------------
// t-SNE

TEST(Tsne, AffinitiesAreDistributionsAtTargetPerplexity) {
  Rng rng(3);
  auto x = clusters(20, 6.0, rng, nullptr);
  const double perp = 10.0;
  auto a = tsne_affinities(x, perp);
  const std::size_t n = x.rows;
  double joint_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0, h = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = a.conditional(i, j);
      s += p;
      if (p > 0) h -= p * std::log(p);
      EXPECT_NEAR(a.joint(i, j), a.joint(j, i), 1e-15);
      joint_sum += a.joint(i, j);
    }
    EXPECT_EQ(a.conditional(i, i), 0.0);
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_NEAR(h, std::log(perp), 1e-5);
  }
  EXPECT_NEAR(joint_sum, 1.0, 1e-6);
}

TEST(Tsne, SeparatedClustersDeterministicAndMonotoneTail) {
  Rng rng(17);
  std::vector<int> ids;
  auto x = clusters(50, 20.0, rng, &ids);
  TsneConfig cfg;
  cfg.seed = 4;
  auto a = tsne(x, cfg);
  auto b = tsne(x, cfg);
  ASSERT_EQ(a.coords.size(), 150u);
  EXPECT_EQ(a.coords, b.coords);
  for (const auto& p : a.coords) EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
  EXPECT_GE(silhouette(a.coords, ids), 0.5);
  ASSERT_EQ(a.kl_history.size(), cfg.iterations);
  for (std::size_t i = a.kl_history.size() - 100; i < a.kl_history.size(); ++i) {
    EXPECT_LE(a.kl_history[i], a.kl_history[i - 1] * (1 + 1e-12)) << "iteration " << i;
  }
  cfg.seed = 5;
  EXPECT_NE(tsne(x, cfg).coords, a.coords);
}

TEST(Tsne, RejectsSmallInput) {
  Rng rng(1);
  auto x = clusters(10, 5.0, rng, nullptr);
  EXPECT_EQ(code_of([&] { tsne(x, {}); }), ErrorCode::invalid_argument);
  TsneConfig cfg;
  cfg.perplexity = 10.0;  // n = 30, needs n > 30
  EXPECT_EQ(code_of([&] { tsne(x, cfg); }), ErrorCode::invalid_argument);
}

// ---------------------------------------------------------------------------
// neighborhood hit

// Full sort of every candidate by (distance, id) and a count over the first k.
std::vector<double> hit_oracle(const std::vector<HitPoint>& pts, std::size_t k) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<std::pair<std::pair<double, std::string>, std::size_t>> cand;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i || (!pts[i].labeled && !pts[j].labeled)) continue;
      const double dx = pts[i].pos[0] - pts[j].pos[0], dy = pts[i].pos[1] - pts[j].pos[1];
      cand.push_back({{dx * dx + dy * dy, pts[j].id}, j});
    }
    std::sort(cand.begin(), cand.end());
    const std::size_t m = std::min(k, cand.size());
    if (m == 0) {
      out.push_back(1.0);
      continue;
    }
    std::size_t same = 0;
    for (std::size_t t = 0; t < m; ++t) same += pts[cand[t].second].cls == pts[i].cls;
    out.push_back(static_cast<double>(same) / m);
  }
  return out;
}

std::vector<HitPoint> random_hit_points(std::size_t n, Rng& rng) {
  std::vector<HitPoint> pts;
  for (std::size_t i = 0; i < n; ++i) {
    HitPoint p;
    p.id = "p" + hilab::test::pad(rng.below(100000)) + "_" + std::to_string(i);
    // Integer grid coordinates produce many exact distance ties.
    p.pos = {double(rng.below(15)), double(rng.below(15))};
    p.cls = std::string(1, char('a' + rng.below(3)));
    p.labeled = rng.below(4) != 0;
    pts.push_back(p);
  }
  return pts;
}

TEST(NeighborhoodHit, HandExamples) {
  std::vector<HitPoint> pts;
  pts.push_back({"c", {0, 0}, "x", true});
  for (int i = 0; i < 6; ++i) pts.push_back({"n" + std::to_string(i), {1.0 + i, 0}, i < 3 ? "x" : "y", true});
  pts.push_back({"far", {100, 100}, "x", true});
  auto hit = neighborhood_hit(pts, 6);
  EXPECT_EQ(hit[0], 0.5);
  std::vector<HitPoint> same;
  for (int i = 0; i < 7; ++i) same.push_back({"s" + std::to_string(i), {double(i), 0}, "x", true});
  for (double h : neighborhood_hit(same, 6)) EXPECT_EQ(h, 1.0);
  std::vector<HitPoint> lonely = {{"u", {0, 0}, "x", false}, {"v", {1, 1}, "y", false}};
  EXPECT_EQ(neighborhood_hit(lonely, 6), (std::vector<double>{1.0, 1.0}));
}

TEST(NeighborhoodHit, MatchesBruteForceOracle) {
  Rng rng(99);
  for (int f = 0; f < 20; ++f) {
    auto pts = random_hit_points(200, rng);
    EXPECT_EQ(neighborhood_hit(pts, 6), hit_oracle(pts, 6)) << "fixture " << f;
  }
  auto small = random_hit_points(5, rng);
  EXPECT_EQ(neighborhood_hit(small, 6), hit_oracle(small, 6));
}

TEST(NeighborhoodHit, PermutationInvariant) {
  Rng rng(4);
  auto pts = random_hit_points(80, rng);
  auto base = neighborhood_hit(pts, 6);
  std::map<std::string, double> by_id;
  for (std::size_t i = 0; i < pts.size(); ++i) by_id[pts[i].id] = base[i];
  auto shuffled = pts;
  rng.shuffle(shuffled);
  auto again = neighborhood_hit(shuffled, 6);
  for (std::size_t i = 0; i < shuffled.size(); ++i) EXPECT_EQ(again[i], by_id[shuffled[i].id]);
}

TEST(ProjectionFile, RoundTripAndKeyHash) {
  ProjectionSet s;
  s.node = "exp";
  s.subset = Subset::unlabeled_train;
  s.method = ProjectionMethod::tsne;
  s.seed = 3;
  s.points = {{"a", 1.5f, -2.f, 0.5f}, {"b", 0.f, 3.25f, 1.f}};
  auto back = decode_projection(encode_projection(s));
  EXPECT_EQ(back.points, s.points);
  EXPECT_EQ(back.node, "exp");
  EXPECT_EQ(back.subset, Subset::unlabeled_train);
  EXPECT_EQ(back.method, ProjectionMethod::tsne);
  ASSERT_TRUE(back.find("b"));
  EXPECT_EQ(back.find("b")->y, 3.25f);
  EXPECT_FALSE(back.find("zz"));

  ProjectionKey k{"exp", Subset::train, ProjectionMethod::pca, 0, 5, 7, 30.0, 6};
  auto k2 = k;
  k2.store_version = 6;
  EXPECT_NE(k.hash(), k2.hash());
  EXPECT_EQ(k.hex().size(), 16u);
  EXPECT_EQ(parse_projection_method("tsne"), ProjectionMethod::tsne);
  EXPECT_EQ(code_of([] { parse_projection_method("umap"); }), ErrorCode::invalid_argument);
}

// ---------------------------------------------------------------------------
// layout

namespace L = hilab::layout;

const std::array<L::Preset, 4> kPresets = {L::Preset::small, L::Preset::medium, L::Preset::large,
                                           L::Preset::very_large};

TEST(Layout, RingCapacitiesFollowRecurrence) {
  const std::vector<std::vector<std::size_t>> expected = {
      {8, 20}, {8, 20, 24}, {8, 20, 24, 52}, {8, 20, 24, 52, 56}};
  for (std::size_t p = 0; p < 4; ++p) {
    auto plans = L::ring_capacities(kPresets[p]);
    std::vector<std::size_t> caps;
    for (std::size_t r = 0; r < plans.size(); ++r) {
      caps.push_back(plans[r].capacity);
      EXPECT_EQ(plans[r].ring_index, r + 1);
      if (r == 0) {
        EXPECT_EQ(plans[r].capacity, 8u);
      } else if (plans[r].cell_scale == L::CellScale::same) {
        EXPECT_EQ(plans[r].capacity, plans[r - 1].capacity + 4);
      } else {
        EXPECT_EQ(plans[r].capacity, 2 * plans[r - 1].capacity + 4);
      }
      EXPECT_EQ(plans[r].capacity, 4 * plans[r].edge_cells + 4);
    }
    EXPECT_EQ(caps, expected[p]);
    EXPECT_EQ(L::total_capacity(kPresets[p]), L::kPresetTotals[p]);
  }
}

TEST(Layout, SmallGeometryByHand) {
  // Extent = center + 2 * ring1 (1) + 2 * ring2 (1/2) = 4 center units.
  auto g = L::ring_geometry(L::Preset::small);
  EXPECT_EQ(g.center, (L::Rect{0.375, 0.375, 0.25, 0.25}));
  ASSERT_EQ(g.rings.size(), 2u);
  ASSERT_EQ(g.rings[0].size(), 8u);
  const std::vector<L::Rect> ring1 = {{0.125, 0.125, 0.25, 0.25}, {0.375, 0.125, 0.25, 0.25},
                                      {0.625, 0.125, 0.25, 0.25}, {0.625, 0.375, 0.25, 0.25},
                                      {0.625, 0.625, 0.25, 0.25}, {0.375, 0.625, 0.25, 0.25},
                                      {0.125, 0.625, 0.25, 0.25}, {0.125, 0.375, 0.25, 0.25}};
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(g.rings[0][i].x, ring1[i].x, 1e-15) << i;
    EXPECT_NEAR(g.rings[0][i].y, ring1[i].y, 1e-15) << i;
    EXPECT_NEAR(g.rings[0][i].w, ring1[i].w, 1e-15) << i;
  }
  ASSERT_EQ(g.rings[1].size(), 20u);
  EXPECT_EQ(g.rings[1][0], (L::Rect{0.0, 0.0, 0.125, 0.125}));
  EXPECT_NEAR(g.rings[1][1].x, 0.125, 1e-15);
  EXPECT_NEAR(g.rings[1][1].w, 0.1875, 1e-15);
  EXPECT_NEAR(g.rings[1][5].x, 0.875, 1e-15);  // TR corner
  EXPECT_NEAR(g.rings[1][10].y, 0.875, 1e-15);  // BR corner
}

TEST(Layout, SpiralExamples) {
  auto one = L::spiral_layout("c", {"n0"}, L::Preset::small);
  ASSERT_EQ(one.boxes.size(), 2u);
  EXPECT_EQ(one.boxes[0].ring, 0u);
  EXPECT_EQ(one.boxes[1].rect, (L::Rect{0.125, 0.125, 0.25, 0.25}));

  std::vector<std::string> nine;
  for (int i = 0; i < 9; ++i) nine.push_back("n" + std::to_string(i));
  auto r = L::spiral_layout("c", nine, L::Preset::small);
  const auto g = L::ring_geometry(L::Preset::small);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(r.boxes[i + 1].rect, g.rings[0][i]);
    EXPECT_EQ(r.boxes[i + 1].ring, 1u);
  }
  EXPECT_EQ(r.boxes[9].ring, 2u);
  EXPECT_EQ(r.boxes[9].rect, (L::Rect{0.0, 0.0, 0.125, 0.125}));

  auto center_only = L::spiral_layout("c", {}, L::Preset::large);
  EXPECT_EQ(center_only.boxes.size(), 1u);

  std::vector<std::string> many(40, "");
  for (int i = 0; i < 40; ++i) many[i] = "m" + hilab::test::pad(i);
  auto trunc = L::spiral_layout("c", many, L::Preset::small);
  EXPECT_EQ(trunc.boxes.size(), 29u);
  ASSERT_EQ(trunc.notices.size(), 1u);
  EXPECT_NE(trunc.notices[0].find("12"), std::string::npos);
}

void expect_valid_layout(const L::LayoutResult& r, const std::string& tag, bool centered = true) {
  std::size_t centers = 0;
  for (std::size_t i = 0; i < r.boxes.size(); ++i) {
    const auto& a = r.boxes[i].rect;
    centers += r.boxes[i].ring == 0;
    EXPECT_GE(a.x, -1e-12) << tag;
    EXPECT_GE(a.y, -1e-12) << tag;
    EXPECT_LE(a.right(), 1 + 1e-12) << tag;
    EXPECT_LE(a.bottom(), 1 + 1e-12) << tag;
    EXPECT_GT(a.w, 0) << tag;
    for (std::size_t j = i + 1; j < r.boxes.size(); ++j) {
      const auto& b = r.boxes[j].rect;
      const double ox = std::min(a.right(), b.right()) - std::max(a.x, b.x);
      const double oy = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
      EXPECT_FALSE(ox > 1e-12 && oy > 1e-12) << tag << ": " << r.boxes[i].image_id << " / " << r.boxes[j].image_id;
    }
  }
  if (centered && !r.boxes.empty()) {
    EXPECT_EQ(centers, 1u) << tag;
    const auto& c = r.boxes[0].rect;
    EXPECT_NEAR(c.x + c.w / 2, 0.5, 1e-12);
    EXPECT_NEAR(c.y + c.h / 2, 0.5, 1e-12);
  }
}

std::vector<L::SpatialItem> random_items(std::size_t n, Rng& rng) {
  std::vector<L::SpatialItem> items;
  for (std::size_t i = 0; i < n; ++i) {
    // Some points land on the axes through the center.
    const double x = rng.below(5) == 0 ? 0.0 : rng.normal();
    const double y = rng.below(5) == 0 ? 0.0 : rng.normal();
    items.push_back({"i" + hilab::test::pad(i), x, y});
  }
  return items;
}

TEST(Layout, RandomInputsNoOverlapAndContainment) {
  Rng rng(2024);
  for (int t = 0; t < 200; ++t) {
    const auto preset = kPresets[rng.below(4)];
    const std::size_t n = rng.below(L::total_capacity(preset) + 20);
    auto items = random_items(n, rng);
    std::vector<std::string> ids;
    for (const auto& i : items) ids.push_back(i.id);
    expect_valid_layout(L::spiral_layout("c", ids, preset), "spiral " + std::to_string(t));
    expect_valid_layout(L::spatial_spiral_layout({"c", 0, 0}, items, preset), "spatial " + std::to_string(t));
    ids.insert(ids.begin(), "c");
    expect_valid_layout(L::grid_layout(ids, 1 + rng.below(8)), "grid " + std::to_string(t), false);
  }
}

TEST(Layout, SpiralSlotOrderIsDistanceMonotone) {
  for (auto preset : kPresets) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < L::total_capacity(preset); ++i) ids.push_back("n" + hilab::test::pad(i));
    auto r = L::spiral_layout("c", ids, preset);
    const auto g = L::ring_geometry(preset);
    std::vector<L::Rect> enumeration;
    for (const auto& ring : g.rings) enumeration.insert(enumeration.end(), ring.begin(), ring.end());
    ASSERT_EQ(r.boxes.size(), ids.size() + 1);
    std::size_t prev_ring = 1;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      EXPECT_EQ(r.boxes[i + 1].image_id, ids[i]);
      EXPECT_EQ(r.boxes[i + 1].rect, enumeration[i]);
      EXPECT_GE(r.boxes[i + 1].ring, prev_ring);
      prev_ring = r.boxes[i + 1].ring;
    }
  }
}

void expect_quadrants_preserved(const L::SpatialItem& center, const std::vector<L::SpatialItem>& items,
                                const L::LayoutResult& r) {
  std::map<std::string, const L::SpatialItem*> by_id;
  for (const auto& i : items) by_id[i.id] = &i;
  std::map<L::Quadrant, std::vector<std::pair<double, std::size_t>>> seen;
  for (std::size_t b = 1; b < r.boxes.size(); ++b) {
    const auto& box = r.boxes[b];
    const auto* item = by_id.at(box.image_id);
    const double dx = item->x - center.x, dy = item->y - center.y;
    // Sign quadrant: screen y grows downward; axis points go clockwise-next.
    L::Quadrant q;
    if (dx < 0 && dy < 0) q = L::Quadrant::nw;
    else if (dx >= 0 && dy < 0) q = L::Quadrant::ne;
    else if (dx > 0 && dy >= 0) q = L::Quadrant::se;
    else if (dx == 0 && dy == 0) q = L::Quadrant::se;
    else if (dx <= 0 && dy > 0) q = L::Quadrant::sw;
    else q = L::Quadrant::nw;  // dx < 0, dy == 0
    EXPECT_EQ(box.quadrant, q) << box.image_id;
    seen[q].push_back({dx * dx + dy * dy, box.ring});
  }
  for (auto& [q, v] : seen) {
    std::sort(v.begin(), v.end());
    for (std::size_t i = 1; i < v.size(); ++i) EXPECT_LE(v[i - 1].second, v[i].second);
  }
}

TEST(Layout, QuadrantOfAxisTies) {
  EXPECT_EQ(L::quadrant_of(-1, -1), L::Quadrant::nw);
  EXPECT_EQ(L::quadrant_of(1, -1), L::Quadrant::ne);
  EXPECT_EQ(L::quadrant_of(1, 1), L::Quadrant::se);
  EXPECT_EQ(L::quadrant_of(-1, 1), L::Quadrant::sw);
  EXPECT_EQ(L::quadrant_of(0, -1), L::Quadrant::ne);
  EXPECT_EQ(L::quadrant_of(1, 0), L::Quadrant::se);
  EXPECT_EQ(L::quadrant_of(0, 1), L::Quadrant::sw);
  EXPECT_EQ(L::quadrant_of(-1, 0), L::Quadrant::nw);
  EXPECT_EQ(L::quadrant_of(0, 0), L::Quadrant::se);
}

TEST(Layout, SpatialSpiralPreservesQuadrants) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto preset = kPresets[rng.below(4)];
    auto items = random_items(rng.below(L::total_capacity(preset) + 1), rng);
    L::SpatialItem center{"c", 0, 0};
    auto r = L::spatial_spiral_layout(center, items, preset);
    EXPECT_EQ(r.boxes.size(), items.size() + 1);
    expect_quadrants_preserved(center, items, r);
  }
}

std::vector<L::SpatialItem> quadrant_fixture(std::array<int, 4> counts, Rng& rng) {
  const double sx[4] = {-1, 1, 1, -1}, sy[4] = {-1, -1, 1, 1};
  std::vector<L::SpatialItem> items;
  for (int q = 0; q < 4; ++q) {
    for (int i = 0; i < counts[q]; ++i) {
      items.push_back({std::string(L::to_string(static_cast<L::Quadrant>(q))) + hilab::test::pad(i, 2),
                       sx[q] * (0.05 + rng.uniform()), sy[q] * (0.05 + rng.uniform())});
    }
  }
  return items;
}

TEST(Layout, SubdivisionCaseTwentyFourFourFour) {
  Rng rng(41);
  auto items = quadrant_fixture({20, 4, 4, 4}, rng);
  L::SpatialItem center{"c", 0, 0};
  auto r = L::spatial_spiral_layout(center, items, L::Preset::small);
  expect_valid_layout(r, "20-4-4-4");
  expect_quadrants_preserved(center, items, r);
  EXPECT_EQ(r.boxes.size(), 33u);
  std::size_t nw_split = 0;
  for (const auto& b : r.boxes) nw_split += b.quadrant == L::Quadrant::nw && b.subdivided;
  EXPECT_GT(nw_split, 0u);
  bool noticed = false;
  for (const auto& n : r.notices) noticed |= n.rfind("NW: subdivided", 0) == 0;
  EXPECT_TRUE(noticed);
}

TEST(Layout, AllNorthWestAndOverflowDrop) {
  Rng rng(5);
  auto items = quadrant_fixture({28, 0, 0, 0}, rng);
  auto r = L::spatial_spiral_layout({"c", 0, 0}, items, L::Preset::small);
  EXPECT_EQ(r.boxes.size(), 29u);
  for (std::size_t b = 1; b < r.boxes.size(); ++b) {
    EXPECT_EQ(r.boxes[b].quadrant, L::Quadrant::nw);
    EXPECT_FALSE(r.boxes[b].subdivided);
  }
  auto over = quadrant_fixture({200, 0, 0, 0}, rng);
  auto d = L::spatial_spiral_layout({"c", 0, 0}, over, L::Preset::small);
  EXPECT_EQ(d.boxes.size(), 1u + 28 * 4);
  bool dropped = false;
  for (const auto& n : d.notices) dropped |= n.find("dropped") != std::string::npos;
  EXPECT_TRUE(dropped);
  expect_valid_layout(d, "overflow");
  EXPECT_EQ(code_of([] { L::spatial_spiral_layout({"c", std::nan(""), 0}, {}, L::Preset::small); }),
            ErrorCode::invalid_argument);
}

TEST(Layout, GridExamples) {
  auto g = L::grid_layout({"a", "b", "c", "d"}, 2);
  ASSERT_EQ(g.boxes.size(), 4u);
  EXPECT_EQ(g.boxes[3].rect, (L::Rect{0.5, 0.5, 0.5, 0.5}));
  auto five = L::grid_layout({"a", "b", "c", "d", "e"}, 2);
  EXPECT_NEAR(five.boxes[4].rect.y, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(five.boxes[4].rect.x, 0.0);
  EXPECT_TRUE(L::grid_layout({}, 3).boxes.empty());
  EXPECT_EQ(code_of([] { L::grid_layout({"a"}, 0); }), ErrorCode::invalid_argument);
}

TEST(Layout, GoldenSvgsAreByteStable) {
  const std::filesystem::path dir = HILAB_GOLDEN_DIR;
  auto fx = nlohmann::json::parse(slurp(dir / "quadrants.json"));
  L::SpatialItem center{fx["center"]["id"], fx["center"]["x"], fx["center"]["y"]};
  std::vector<L::SpatialItem> items;
  for (const auto& n : fx["neighbors"]) items.push_back({n["id"], n["x"], n["y"]});
  EXPECT_EQ(L::to_svg(L::spatial_spiral_layout(center, items, L::Preset::small), 512),
            slurp(dir / "spatial_small.svg"));
  auto sorted = items;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    const double da = a.x * a.x + a.y * a.y, db = b.x * b.x + b.y * b.y;
    return da != db ? da < db : a.id < b.id;
  });
  std::vector<std::string> ids;
  for (const auto& i : sorted) ids.push_back(i.id);
  EXPECT_EQ(L::to_svg(L::spiral_layout(center.id, ids, L::Preset::medium), 512), slurp(dir / "spiral_medium.svg"));
  ids.insert(ids.begin(), center.id);
  EXPECT_EQ(L::to_svg(L::grid_layout(ids, 6), 512), slurp(dir / "grid.svg"));
}

// ---------------------------------------------------------------------------
// analytics

namespace A = hilab::analytics;

TEST(Analytics, DatasetSummaryCaseStudyRatio) {
  auto t = fixture_taxonomy();
  std::vector<ImageRecord> recs;
  auto add = [&](const std::string& label, LabelKind kind, bool deleted = false) {
    ImageRecord r;
    r.id = "r" + hilab::test::pad(recs.size());
    r.label = LabelPath::parse(label);
    r.label_kind = kind;
    r.deleted = deleted;
    recs.push_back(r);
  };
  for (int i = 0; i < 157; ++i) add("exp.gel", LabelKind::ground_truth);
  for (int i = 0; i < 6; ++i) add("exp.plate", LabelKind::ground_truth);
  add("exp.plate", LabelKind::ground_truth, true);
  add("microscopy.fluorescence", LabelKind::ground_truth);
  add("microscopy.light", LabelKind::pseudo);
  auto s = A::dataset_summary(t, recs, "root");
  ASSERT_EQ(s.children.size(), 2u);
  const auto& exp = s.children[0];
  EXPECT_EQ(exp.node, "exp");
  EXPECT_EQ(exp.classes[0].ground_truth, 157u);
  EXPECT_EQ(exp.classes[1].ground_truth, 6u);
  EXPECT_EQ(exp.total, 163u);
  EXPECT_NEAR(exp.classes[0].fraction, 157.0 / 163.0, 1e-15);
  EXPECT_EQ(s.classes[1].cls, "microscopy");
  EXPECT_EQ(s.classes[1].ground_truth, 1u);
  EXPECT_EQ(s.classes[1].pseudo, 1u);
  const auto& mic = s.children[1];
  EXPECT_EQ(mic.classes[1].cls, "fluorescence");
  EXPECT_EQ(mic.classes[1].ground_truth, 1u);
  auto empty = A::dataset_summary(t, {}, "root");
  EXPECT_EQ(empty.total, 0u);
  for (const auto& c : empty.classes) EXPECT_EQ(c.fraction, 0.0);
}

PredictionRecord prediction(const std::string& id, const std::string& cls, double top, bool confident,
                            const std::vector<std::string>& classes = {"gel", "plate"}) {
  PredictionRecord p;
  p.image_id = id;
  p.node = "exp";
  p.predicted_class = cls;
  p.probs.assign(classes.size(), (1 - top) / (classes.size() - 1));
  p.probs[std::find(classes.begin(), classes.end(), cls) - classes.begin()] = top;
  p.margin = top - (1 - top) / (classes.size() - 1);
  p.confident = confident;
  return p;
}

TEST(Analytics, FilterSummaryLogHeights) {
  auto t = fixture_taxonomy();
  Store s(t);
  std::vector<ManifestRow> rows;
  std::vector<PredictionRecord> preds;
  for (int i = 0; i < 100; ++i) {
    rows.push_back(row("g" + hilab::test::pad(i), "exp.gel"));
    preds.push_back(prediction("g" + hilab::test::pad(i), "gel", 0.95, false));
  }
  rows.push_back(row("u0"));
  preds.push_back(prediction("u0", "plate", 0.55, false));
  s.ingest(rows);
  s.set_predictions("exp", preds);
  QueryFilter f;
  f.node = "exp";
  auto fs = A::filter_summary(t, s, f);
  EXPECT_EQ(fs.total, 101u);
  EXPECT_EQ(fs.label_bars["gel"], 100u);
  EXPECT_EQ(fs.label_bars["plate"], 0u);
  EXPECT_EQ(fs.prediction_bars["plate"], 1u);
  EXPECT_EQ(fs.source_bars["pmc"], 101u);
  EXPECT_EQ(A::probability_bin(0.95), 9u);
  EXPECT_EQ(A::probability_bin(1.0), 9u);
  EXPECT_EQ(A::probability_bin(0.0), 0u);
  EXPECT_NEAR(fs.histograms["gel"].labeled_height(9), 2.00432137378264, 1e-12);
  EXPECT_EQ(fs.histograms["gel"].labeled_height(3), 0.0);
  EXPECT_EQ(fs.histograms["plate"].unlabeled[5], 1u);
}

TEST(Analytics, GalleryTabs) {
  auto t = fixture_taxonomy();
  Store s(t);
  std::vector<ManifestRow> rows;
  std::vector<PredictionRecord> preds;
  for (int i = 0; i < 100; ++i) {
    const auto id = "l" + hilab::test::pad(i);
    rows.push_back(row(id, i % 2 ? "exp.gel" : "exp.plate"));
    // 58 wrong predictions among labeled images.
    const bool wrong = i < 58;
    const std::string truth = i % 2 ? "gel" : "plate";
    const std::string other = truth == "gel" ? "plate" : "gel";
    preds.push_back(prediction(id, wrong ? other : truth, 0.8, false));
  }
  rows.push_back(row("c1"));
  rows.push_back(row("c2"));
  rows.push_back(row("c3"));
  preds.push_back(prediction("c1", "gel", 0.96, true));
  preds.push_back(prediction("c2", "plate", 0.999, true));
  preds.push_back(prediction("c3", "gel", 0.6, false));
  s.ingest(rows);
  s.set_predictions("exp", preds);

  auto mis = A::gallery(t, s, "exp", A::GalleryTab::mispredicted, nullptr, 0, 20);
  EXPECT_EQ(mis.total, 58u);
  EXPECT_EQ(mis.items.size(), 20u);
  auto last = A::gallery(t, s, "exp", A::GalleryTab::mispredicted, nullptr, 2, 20);
  EXPECT_EQ(last.items.size(), 18u);
  EXPECT_EQ(code_of([&] { A::gallery(t, s, "exp", A::GalleryTab::mispredicted, nullptr, 3, 20); }),
            ErrorCode::invalid_argument);

  auto conf = A::gallery(t, s, "exp", A::GalleryTab::confident, nullptr, 0, 10);
  ASSERT_EQ(conf.items.size(), 2u);
  EXPECT_EQ(conf.items[0].image_id, "c2");
  EXPECT_EQ(conf.items[1].image_id, "c1");
  auto unc = A::gallery(t, s, "exp", A::GalleryTab::uncertain, nullptr, 0, 10);
  ASSERT_EQ(unc.items.size(), 1u);
  EXPECT_EQ(unc.items[0].image_id, "c3");

  ProjectionSet set;
  set.points = {{"c1", 0.f, 0.f, 1.f}, {"c2", 5.f, 5.f, 1.f}};
  EXPECT_TRUE(A::brush(set, 10, 10, 20, 20).empty());
  auto sel_ids = A::brush(set, 6, 6, -1, -1);
  EXPECT_EQ(sel_ids, (std::vector<std::string>{"c1", "c2"}));
  auto sel = A::gallery(t, s, "exp", A::GalleryTab::selected, &sel_ids, 0, 10);
  EXPECT_EQ(sel.total, 2u);
  std::vector<std::string> none;
  EXPECT_EQ(A::gallery(t, s, "exp", A::GalleryTab::selected, &none, 0, 10).total, 0u);
}

UpdateEvent relabel(const std::string& id, std::optional<std::string> from, const std::string& to,
                    LabelKind old_kind = LabelKind::ground_truth) {
  UpdateEvent e;
  e.session_id = "s";
  e.image_id = id;
  e.action = UpdateAction::relabel;
  if (from) e.old_label = LabelPath::parse(*from);
  e.old_kind = from ? old_kind : LabelKind::none;
  e.new_label = LabelPath::parse(to);
  return e;
}

UpdateEvent removal(const std::string& id, const std::string& from) {
  UpdateEvent e;
  e.session_id = "s";
  e.image_id = id;
  e.action = UpdateAction::remove;
  e.old_label = LabelPath::parse(from);
  e.old_kind = LabelKind::ground_truth;
  return e;
}

std::map<std::pair<std::string, std::string>, std::size_t> flows_of(const std::vector<A::SankeyFlow>& v,
                                                                      bool rollup) {
  std::map<std::pair<std::string, std::string>, std::size_t> out;
  for (const auto& f : v) {
    if (f.rollup == rollup) out[{f.from, f.to}] += f.count;
  }
  return out;
}

TEST(Analytics, SankeyCaseStudySession) {
  std::vector<UpdateEvent> ev = {
      relabel("a", "exp.gel", "exp.plate"),        relabel("b", "exp.gel", "exp.plate"),
      relabel("c", "exp.gel", "microscopy.light"), removal("d", "exp.gel"),
      removal("e", "exp.gel"),                     removal("f", "exp.plate"),
  };
  auto flows = A::sankey(ev);
  auto leaf = flows_of(flows, false);
  EXPECT_EQ(leaf[std::make_pair(std::string("exp.gel"), std::string("exp.plate"))], 2u);
  EXPECT_EQ(leaf[std::make_pair(std::string("exp.gel"), std::string("microscopy.light"))], 1u);
  std::size_t deleted = 0;
  for (const auto& [k, n] : leaf) deleted += k.second == A::kDeleted ? n : 0;
  EXPECT_EQ(deleted, 3u);
  auto roll = flows_of(flows, true);
  EXPECT_EQ(roll[std::make_pair(std::string("exp"), std::string("microscopy"))], 1u);
  EXPECT_EQ(roll[std::make_pair(std::string("exp"), std::string("exp"))], 2u);
  EXPECT_EQ(roll[std::make_pair(std::string("exp"), std::string(A::kDeleted))], 3u);
  EXPECT_TRUE(A::sankey({}).empty());
}

TEST(Analytics, SankeyNetEffect) {
  EXPECT_TRUE(A::sankey({relabel("a", "exp.gel", "exp.plate"), relabel("a", "exp.plate", "exp.gel")}).empty());
  auto chain = A::sankey({relabel("a", "exp.gel", "exp.plate"), relabel("a", "exp.plate", "microscopy")});
  auto leaf = flows_of(chain, false);
  ASSERT_EQ(leaf.size(), 1u);
  EXPECT_EQ(leaf.begin()->first, std::make_pair(std::string("exp.gel"), std::string("microscopy")));
  auto fresh = flows_of(A::sankey({relabel("n", std::nullopt, "exp.gel")}), false);
  EXPECT_EQ(fresh.begin()->first.first, A::kUnlabeled);
  UpdateEvent restore;
  restore.image_id = "a";
  restore.action = UpdateAction::restore;
  restore.old_label = LabelPath::parse("exp.gel");
  restore.old_kind = LabelKind::ground_truth;
  auto del = removal("a", "exp.gel");
  EXPECT_TRUE(A::sankey({del, restore}).empty());
}

TEST(Analytics, SankeyRestoreSeesOtherSessionsLabel) {
  auto t = fixture_taxonomy();
  Store s(t);
  s.ingest({row("a", "exp.gel")});
  auto apply = [&](const std::string& session, UpdateAction action, std::optional<std::string> label = {}) {
    UpdateEvent e;
    e.session_id = session;
    e.image_id = "a";
    e.action = action;
    if (label) e.new_label = LabelPath::parse(*label);
    s.apply_update(e);
  };
  apply("alice", UpdateAction::relabel, "exp.plate");
  apply("bob", UpdateAction::relabel, "microscopy.light");
  apply("alice", UpdateAction::remove);
  apply("alice", UpdateAction::restore);
  auto leaf = flows_of(A::sankey(s.session_events("alice")), false);
  ASSERT_EQ(leaf.size(), 1u);
  EXPECT_EQ(leaf.begin()->first, std::make_pair(std::string("exp.gel"), std::string("microscopy.light")));
}

TEST(Analytics, SankeyConservationOnRandomSessions) {
  Rng rng(31);
  auto t = fixture_taxonomy();
  std::vector<LabelPath> labels;
  for (const auto& n : t.nodes())
    if (n.id != t.root()) labels.push_back(t.path_of(n.id));
  for (int trial = 0; trial < 30; ++trial) {
    Store s(t);
    std::vector<ManifestRow> rows;
    for (int i = 0; i < 40; ++i) {
      rows.push_back(row("x" + hilab::test::pad(i), rng.below(3) ? labels[rng.below(labels.size())].str() : ""));
    }
    s.ingest(rows);
    const auto before = s.records();
    for (int k = 0; k < 120; ++k) {
      UpdateEvent e;
      e.session_id = "s";
      e.image_id = "x" + hilab::test::pad(rng.below(40));
      const auto roll = rng.below(10);
      e.action = roll < 7 ? UpdateAction::relabel : roll < 9 ? UpdateAction::remove : UpdateAction::restore;
      if (e.action == UpdateAction::relabel) e.new_label = labels[rng.below(labels.size())];
      try {
        s.apply_update(e);
      } catch (const Error&) {
      }
    }
    // Oracle: compare the first and final state of every image directly.
    std::map<std::string, std::string> start, end;
    auto state = [](const ImageRecord& r) {
      if (r.deleted) return A::kDeleted;
      return r.label && r.label_kind == LabelKind::ground_truth ? r.label->str() : A::kUnlabeled;
    };
    for (const auto& r : before) start[r.id] = state(r);
    for (const auto& r : s.records()) end[r.id] = state(r);
    std::map<std::string, std::size_t> leaving;
    std::size_t changed = 0;
    for (const auto& [id, st] : start) {
      if (end[id] != st) {
        ++leaving[st];
        ++changed;
      }
    }
    auto flows = flows_of(A::sankey(s.session_events("s")), false);
    std::map<std::string, std::size_t> out_by_source;
    std::size_t total = 0;
    for (const auto& [k, n] : flows) {
      out_by_source[k.first] += n;
      total += n;
    }
    EXPECT_EQ(total, changed);
    EXPECT_EQ(out_by_source, leaving);
  }
}
