#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "hilab/hilab.hpp"

namespace hilab::test {

/// root{exp:{gel,plate}, microscopy:{light,fluorescence,electron:{scanning,transmission}}}
inline const char* kTaxonomyText =
    "root\t-\tAll figures\n"
    "exp\troot\tExperimental\n"
    "gel\texp\tGel\n"
    "plate\texp\tPlate\n"
    "microscopy\troot\tMicroscopy\n"
    "light\tmicroscopy\tLight\n"
    "fluorescence\tmicroscopy\tFluorescence\n"
    "electron\tmicroscopy\tElectron\n"
    "scanning\telectron\tScanning\n"
    "transmission\telectron\tTransmission\n";

inline Taxonomy fixture_taxonomy() { return Taxonomy::parse(kTaxonomyText); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("hilab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline ManifestRow row(std::string id, std::string label = "", std::string split = "", std::string source = "pmc") {
  ManifestRow r;
  r.id = std::move(id);
  r.uri = r.id + ".ppm";
  r.source = std::move(source);
  r.label = std::move(label);
  r.split = std::move(split);
  return r;
}

inline std::string pad(std::size_t i, int width = 4) {
  std::string s = std::to_string(i);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

/// Isotropic Gaussian blobs: `per_class` points around each center.
inline LabeledSet gaussian_blobs(const std::vector<std::vector<double>>& centers, std::size_t per_class, double sigma,
                                 Rng& rng, const std::string& prefix = "p") {
  LabeledSet s;
  std::size_t k = 0;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> x(centers[c].size());
      for (std::size_t d = 0; d < x.size(); ++d) x[d] = centers[c][d] + sigma * rng.normal();
      s.add(prefix + pad(k++), std::move(x), c);
    }
  }
  return s;
}

/// Class-dependent synthetic figure: gels get horizontal bands, plates get a
/// bright disc; plus pixel noise.
inline Image synthetic_figure(int kind, std::uint32_t size, Rng& rng) {
  Image img(size, size);
  for (std::uint32_t y = 0; y < size; ++y) {
    for (std::uint32_t x = 0; x < size; ++x) {
      double v;
      if (kind == 0) {
        v = (y / 4) % 2 ? 0.85 : 0.15;
      } else {
        const double dx = x + 0.5 - size / 2.0, dy = y + 0.5 - size / 2.0;
        v = dx * dx + dy * dy < size * size / 9.0 ? 0.9 : 0.3;
      }
      v += 0.05 * rng.normal();
      const auto b = static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0);
      if (kind == 0) img.set(x, y, b, b, b);
      else img.set(x, y, b, static_cast<std::uint8_t>(b / 2), static_cast<std::uint8_t>(255 - b));
    }
  }
  return img;
}

struct RandomTree {
  std::string text;
  std::vector<LabelPath> labels;  // every valid label path
};

/// Random tree of depth <= 3 with 1-4 children per internal node.
inline RandomTree random_taxonomy(Rng& rng) {
  RandomTree t;
  t.text = "root\t-\tRoot\n";
  std::size_t next = 0;
  std::function<void(const std::string&, const LabelPath&, int)> grow = [&](const std::string& parent,
                                                                             const LabelPath& path, int depth) {
    if (depth == 3) return;
    const std::size_t kids = depth == 0 ? 2 + rng.below(3) : rng.below(5);
    for (std::size_t i = 0; i < kids; ++i) {
      const std::string id = "n" + std::to_string(next++);
      t.text += id + "\t" + parent + "\t" + id + "\n";
      auto p = path.child(id);
      t.labels.push_back(p);
      grow(id, p, depth + 1);
    }
  };
  grow("root", LabelPath{}, 0);
  return t;
}

/// root{a, b, c}
inline const char* kFlatTaxonomyText = "root\t-\tAll\na\troot\tA\nb\troot\tB\nc\troot\tC\n";

/// Workspace with synthetic external features:
/// one Gaussian blob per class of `node`, centered at `scale` on its own axis.
/// Labeled rows get `noise` probability of a wrong class; `truth` keeps the
/// real class of every image.
struct BlobScenario {
  std::unique_ptr<Workspace> ws;
  std::map<ImageId, std::string> truth;
  std::vector<ImageId> labeled;
  std::vector<ImageId> unlabeled;
};

inline BlobScenario blob_workspace(const NodeId& node, std::size_t labeled_per_class, std::size_t unlabeled_per_class,
                                   double scale, double sigma, double noise, Rng& rng, WorkspaceOptions options = {},
                                   const std::filesystem::path& dir = {}, const char* taxonomy_text = kTaxonomyText) {
  BlobScenario sc;
  sc.ws = std::make_unique<Workspace>(Taxonomy::parse(taxonomy_text), options, dir);
  const auto& tax = sc.ws->taxonomy();
  const auto classes = tax.node(node).children;
  const auto path = tax.path_of(node);
  const std::size_t dim = classes.size() + 2;
  std::vector<ManifestRow> rows;
  std::vector<std::pair<ImageId, std::vector<double>>> feats;
  std::size_t k = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (std::size_t i = 0; i < labeled_per_class + unlabeled_per_class; ++i) {
      const bool labeled = i < labeled_per_class;
      const ImageId id = (labeled ? "l" : "u") + pad(k++, 5);
      std::vector<double> x(dim);
      for (std::size_t d = 0; d < dim; ++d) x[d] = sigma * rng.normal() + (d == c ? scale : 0.0);
      feats.push_back({id, std::move(x)});
      sc.truth[id] = classes[c];
      std::string label = path.empty() ? "" : path.str();
      if (labeled) {
        std::size_t shown = c;
        if (rng.uniform() < noise) shown = (c + 1 + rng.below(classes.size() - 1)) % classes.size();
        label = path.child(classes[shown]).str();
        sc.labeled.push_back(id);
      } else {
        sc.unlabeled.push_back(id);
      }
      rows.push_back(row(id, label));
    }
  }
  sc.ws->ingest(rows);
  for (auto& [id, x] : feats) sc.ws->attach_features(id, std::move(x), FeatureKind::external);
  return sc;
}

}  // namespace hilab::test
