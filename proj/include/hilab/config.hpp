#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hilab/common.hpp"

namespace hilab {

/// `key = value` settings shared by the server and the CLI. Blank lines and
/// lines starting with `#` are ignored. Relative paths resolve against the
/// directory holding the file.
struct Config {
  std::filesystem::path store_path = "hilab-store";
  std::filesystem::path taxonomy_path = "taxonomy.tsv";
  double delta = 0.05;
  std::size_t retrain_increment = 50;
  std::size_t nh_k = 6;
  double nh_threshold = 0.5;
  double perplexity = 30.0;
  int port = 8080;
  double learning_rate = 1e-4;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  std::size_t worker_threads = 1;

  static Config parse(std::string_view text, const std::filesystem::path& base = {}) {
    Config c;
    std::size_t line_no = 0;
    for (const auto& raw : detail::split(text, '\n')) {
      ++line_no;
      auto line = detail::trim(raw);
      if (line.empty() || line[0] == '#') continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorCode::invalid_argument, "config line " + std::to_string(line_no) + ": expected key = value");
      }
      auto key = detail::trim(line.substr(0, eq));
      auto value = detail::trim(line.substr(eq + 1));
      try {
        c.set(key, value, base);
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::invalid_argument,
                    "config line " + std::to_string(line_no) + ": bad value '" + value + "' for " + key);
      }
    }
    c.validate();
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.parent_path());
  }

  void set(const std::string& key, const std::string& value, const std::filesystem::path& base = {}) {
    auto resolve = [&](const std::string& v) {
      std::filesystem::path p(v);
      return p.is_relative() && !base.empty() ? base / p : p;
    };
    if (key == "store_path") store_path = resolve(value);
    else if (key == "taxonomy_path") taxonomy_path = resolve(value);
    else if (key == "delta") delta = std::stod(value);
    else if (key == "retrain_increment") retrain_increment = std::stoul(value);
    else if (key == "nh_k") nh_k = std::stoul(value);
    else if (key == "nh_threshold") nh_threshold = std::stod(value);
    else if (key == "perplexity") perplexity = std::stod(value);
    else if (key == "port") port = std::stoi(value);
    else if (key == "learning_rate") learning_rate = std::stod(value);
    else if (key == "max_epochs") max_epochs = std::stoul(value);
    else if (key == "patience") patience = std::stoul(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "worker_threads") worker_threads = std::stoul(value);
    else throw Error(ErrorCode::invalid_argument, "unknown config key '" + key + "'");
  }

  void validate() const {
    if (!(delta >= 0.0)) throw Error(ErrorCode::invalid_argument, "delta must be >= 0");
    if (retrain_increment < 1) throw Error(ErrorCode::invalid_argument, "retrain_increment must be >= 1");
    if (nh_k < 1) throw Error(ErrorCode::invalid_argument, "nh_k must be >= 1");
    if (!(nh_threshold >= 0.0 && nh_threshold <= 1.0)) {
      throw Error(ErrorCode::invalid_argument, "nh_threshold must be in [0, 1]");
    }
    if (!(perplexity > 0.0)) throw Error(ErrorCode::invalid_argument, "perplexity must be positive");
    if (port < 0 || port > 65535) throw Error(ErrorCode::invalid_argument, "port out of range");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::invalid_argument, "learning_rate must be positive");
    if (worker_threads < 1) throw Error(ErrorCode::invalid_argument, "worker_threads must be >= 1");
  }
};

}  // namespace hilab
