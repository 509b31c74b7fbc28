#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hilab {

enum class ErrorCode {
  invalid_argument,
  invalid_taxonomy,
  invalid_label,
  unknown_image,
  conflict,
  dimension_mismatch,
  decode_error,
  io_error,
  training_refused,
  unavailable,
  not_found,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_taxonomy: return "invalid_taxonomy";
    case ErrorCode::invalid_label: return "invalid_label";
    case ErrorCode::unknown_image: return "unknown_image";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::decode_error: return "decode_error";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::training_refused: return "training_refused";
    case ErrorCode::unavailable: return "unavailable";
    case ErrorCode::not_found: return "not_found";
  }
  return "unknown";
}

/// Every engine failure is reported through this type; `code()` is stable
/// and machine-parsable, `what()` names the offending entity.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

namespace detail {

inline std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(text.substr(start));
      return out;
    }
    out.emplace_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string trim(std::string_view text) {
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  std::size_t b = 0, e = text.size();
  while (b < e && is_space(text[b])) ++b;
  while (e > b && is_space(text[e - 1])) --e;
  return std::string(text.substr(b, e - b));
}

inline std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(sep);
    out += parts[i];
  }
  return out;
}

// 64-bit FNV-1a, used for cache keys and fingerprints.
class Fnv1a {
 public:
  void add(const void* data, std::size_t n) {
    auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void add(std::string_view s) {
    add(s.data(), s.size());
    add_value<std::uint64_t>(s.size());
  }
  template <typename T>
  void add_value(T v) {
    add(&v, sizeof(T));
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace detail

/// Portable seeded generator. std distributions are implementation-defined,
/// so every draw used by the engine goes through these members to keep
/// results identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % bound;
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Largest-remainder apportionment of `total` units by `weights`.
/// Ties in the fractional part go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::size_t total,
                                                  const std::vector<double>& weights) {
  std::vector<std::size_t> out(weights.size(), 0);
  double sum = 0.0;
  for (double w : weights) sum += w;
  if (weights.empty() || sum <= 0.0) return out;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(exact + 1e-12));
    assigned += out[i];
    rem.emplace_back(exact - static_cast<double>(out[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t k = 0; assigned < total && k < rem.size(); ++k, ++assigned) {
    ++out[rem[k].second];
  }
  return out;
}

}  // namespace hilab
