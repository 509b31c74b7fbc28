#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hilab/hilab.hpp"
#include "hilab/server.hpp"

namespace {

using json = nlohmann::json;

std::string read_text(const std::filesystem::path& path) {
  auto bytes = hilab::read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_output(const std::string& out_path, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw hilab::Error(hilab::ErrorCode::io_error, "cannot write " + out_path);
}

hilab::layout::LayoutResult layout_from_fixture(const json& fx, hilab::layout::Preset preset,
                                                const std::string& kind) {
  const auto& c = fx.at("center");
  hilab::layout::SpatialItem center{c.at("id").get<std::string>(), c.value("x", 0.0), c.value("y", 0.0)};
  std::vector<hilab::layout::SpatialItem> items;
  for (const auto& n : fx.at("neighbors")) {
    items.push_back({n.at("id").get<std::string>(), n.value("x", 0.0), n.value("y", 0.0)});
  }
  if (kind == "spatial") return hilab::layout::spatial_spiral_layout(center, items, preset);
  std::stable_sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
    const double da = (a.x - center.x) * (a.x - center.x) + (a.y - center.y) * (a.y - center.y);
    const double db = (b.x - center.x) * (b.x - center.x) + (b.y - center.y) * (b.y - center.y);
    if (da != db) return da < db;
    return a.id < b.id;
  });
  std::vector<std::string> ids;
  for (const auto& i : items) ids.push_back(i.id);
  if (kind == "spiral") return hilab::layout::spiral_layout(center.id, ids, preset);
  if (kind == "grid") {
    ids.insert(ids.begin(), center.id);
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(ids.size()))));
    return hilab::layout::grid_layout(ids, cols);
  }
  throw hilab::Error(hilab::ErrorCode::invalid_argument, "unknown layout '" + kind + "'");
}

hilab::Server* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->http().stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical image labeling engine"};
  app.require_subcommand(1);

  std::string config_path, store_dir, taxonomy_path;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--store", store_dir, "Store directory (overrides store_path)");
  app.add_option("--taxonomy", taxonomy_path, "Taxonomy file (overrides taxonomy_path)");

  auto* ingest = app.add_subcommand("ingest", "Add images from a CSV manifest");
  std::string manifest;
  ingest->add_option("manifest", manifest, "Manifest with header id,uri,source,label,split,caption")->required();

  auto* features = app.add_subcommand("features", "Attach feature vectors");
  features->require_subcommand(1);
  auto* extract = features->add_subcommand("extract", "Compute builtin features from image files");
  std::string image_root = ".";
  extract->add_option("--image-root", image_root, "Directory relative image URIs resolve against");
  auto* import = features->add_subcommand("import", "Import an external feature matrix");
  std::string matrix_path;
  import->add_option("matrix", matrix_path, "Binary feature matrix")->required();

  auto* split = app.add_subcommand("split", "Assign stratified train/val/test splits");
  std::uint64_t split_seed = 0;
  split->add_option("--seed", split_seed, "Shuffle seed");

  auto* train = app.add_subcommand("train", "Train one classifier node");
  std::string train_node;
  train->add_option("--node", train_node, "Classifier node id")->required();

  auto* al = app.add_subcommand("al-step", "Run one active-learning step on a node");
  std::string al_node;
  al->add_option("--node", al_node, "Classifier node id")->required();

  auto* project = app.add_subcommand("project", "Compute a 2-D projection");
  std::string project_node, method = "pca", subset = "all", project_out;
  std::uint64_t project_seed = 0;
  project->add_option("--node", project_node, "Classifier node id")->required();
  project->add_option("--method", method, "pca or tsne")->check(CLI::IsMember({"pca", "tsne"}));
  project->add_option("--subset", subset, "train, val, test, unlabeled, unlabeled+train or all");
  project->add_option("--seed", project_seed, "t-SNE seed");
  project->add_option("--out", project_out, "Write points JSON here instead of stdout");

  auto* serve = app.add_subcommand("serve", "Run the HTTP server");
  std::string host = "127.0.0.1";
  int port_override = -1;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port_override, "Port (overrides config)");

  auto* export_labels = app.add_subcommand("export-labels", "Write ground-truth labels as a manifest");
  std::string export_out;
  export_labels->add_option("--out", export_out, "Output file (default stdout)");

  auto* layout_svg = app.add_subcommand("layout-svg", "Render a neighborhood layout fixture as SVG");
  std::string preset_name = "small", fixture_path, layout_kind = "spatial", svg_out;
  double svg_size = 512.0;
  layout_svg->add_option("--preset", preset_name, "small, medium, large or very_large");
  layout_svg->add_option("--fixture", fixture_path, "JSON with center and neighbors (id, x, y)")->required();
  layout_svg->add_option("--layout", layout_kind, "spatial, spiral or grid");
  layout_svg->add_option("--size", svg_size, "Canvas size in pixels");
  layout_svg->add_option("--out", svg_out, "Output file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    hilab::Config config;
    if (!config_path.empty()) config = hilab::Config::load(config_path);
    if (!store_dir.empty()) config.store_path = store_dir;
    if (!taxonomy_path.empty()) config.taxonomy_path = taxonomy_path;
    auto open = [&] { return hilab::Workspace::open(config); };

    if (*layout_svg) {
      auto fx = json::parse(read_text(fixture_path));
      auto result = layout_from_fixture(fx, hilab::layout::parse_preset(preset_name), layout_kind);
      for (const auto& n : result.notices) std::cerr << "notice: " << n << '\n';
      write_output(svg_out, hilab::layout::to_svg(result, svg_size));
      return 0;
    }

    auto ws = open();
    if (*ingest) {
      auto report = ws->ingest(hilab::parse_manifest(read_text(manifest)));
      std::cout << json{{"ingested", report.ingested}, {"rejected", report.rejected}}.dump() << '\n';
      return report.rejected.empty() ? 0 : 3;
    }
    if (*extract) {
      auto report = ws->extract_features(image_root);
      std::cout << json{{"extracted", report.count}, {"rejected", report.rejected}}.dump() << '\n';
      return 0;
    }
    if (*import) {
      auto report = ws->import_features(hilab::read_file_bytes(matrix_path));
      std::cout << json{{"imported", report.count}, {"rejected", report.rejected}}.dump() << '\n';
      return 0;
    }
    if (*split) {
      auto result = ws->split(split_seed);
      std::size_t counts[3] = {0, 0, 0};
      for (const auto& a : result.assignments) {
        if (a.split != hilab::Split::unlabeled) ++counts[static_cast<int>(a.split)];
      }
      auto violations = ws->verify_splits();
      std::vector<std::string> messages;
      for (const auto& v : violations) messages.push_back(v.message);
      std::cout << json{{"train", counts[0]},
                        {"val", counts[1]},
                        {"test", counts[2]},
                        {"warnings", result.warnings},
                        {"violations", messages}}
                       .dump()
                << '\n';
      return violations.empty() ? 0 : 4;
    }
    if (*train) {
      auto outcome = ws->train(train_node);
      std::cout << hilab::api::to_json(outcome).dump() << '\n';
      return 0;
    }
    if (*al) {
      std::cout << hilab::api::to_json(ws->al_step(al_node)).dump() << '\n';
      return 0;
    }
    if (*project) {
      auto set = ws->project(project_node, hilab::parse_subset(subset), hilab::parse_projection_method(method),
                             project_seed);
      json points = json::array();
      for (const auto& p : set.points) {
        points.push_back({{"image_id", p.image_id}, {"x", p.x}, {"y", p.y}, {"neighborhood_hit", p.neighborhood_hit}});
      }
      write_output(project_out, json{{"node", set.node},
                                     {"subset", hilab::to_string(set.subset)},
                                     {"method", hilab::to_string(set.method)},
                                     {"seed", set.seed},
                                     {"points", points},
                                     {"warnings", set.warnings}}
                                        .dump() +
                                    "\n");
      return 0;
    }
    if (*export_labels) {
      write_output(export_out, ws->export_labels());
      return 0;
    }
    if (*serve) {
      const int port = port_override >= 0 ? port_override : config.port;
      hilab::Server server(*ws, config.worker_threads);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << host << ':' << port << '\n';
      if (!server.listen(host, port)) {
        throw hilab::Error(hilab::ErrorCode::io_error, "cannot listen on port " + std::to_string(port));
      }
      server.stop();
      g_server = nullptr;
      return 0;
    }
  } catch (const hilab::Error& e) {
    std::cerr << "error: " << hilab::to_string(e.code()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
