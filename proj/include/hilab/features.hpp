#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hilab/common.hpp"

namespace hilab {

/// Interleaved 8-bit RGB raster.
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h) : width(w), height(h), rgb(std::size_t(w) * h * 3, 0) {}

  std::uint8_t* at(std::uint32_t x, std::uint32_t y) { return &rgb[(std::size_t(y) * width + x) * 3]; }
  const std::uint8_t* at(std::uint32_t x, std::uint32_t y) const {
    return &rgb[(std::size_t(y) * width + x) * 3];
  }
  void set(std::uint32_t x, std::uint32_t y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto* p = at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
};

namespace detail {

class PnmReader {
 public:
  explicit PnmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  int token_int() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) throw std::runtime_error("expected number");
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > (1 << 24)) throw std::runtime_error("number out of range");
    }
    return static_cast<int>(v);
  }
  std::uint8_t byte() {
    if (pos_ >= bytes_.size()) throw std::runtime_error("truncated pixel data");
    return bytes_[pos_++];
  }
  void skip_single_space() {
    if (pos_ >= bytes_.size()) throw std::runtime_error("truncated header");
    ++pos_;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes binary or ASCII netpbm (P2, P3, P5, P6) with maxval <= 255.
inline Image decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') {
    throw Error(ErrorCode::decode_error, "not a netpbm image");
  }
  const char kind = static_cast<char>(bytes[1]);
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
    throw Error(ErrorCode::decode_error, std::string("unsupported netpbm variant P") + kind);
  }
  try {
    detail::PnmReader rd(bytes.subspan(2));
    const int w = rd.token_int();
    const int h = rd.token_int();
    const int maxval = rd.token_int();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
      throw std::runtime_error("bad dimensions or maxval");
    }
    Image img(static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(h));
    const bool color = kind == '3' || kind == '6';
    const bool binary = kind == '5' || kind == '6';
    if (binary) rd.skip_single_space();
    auto scale = [maxval](int v) {
      if (v > maxval) throw std::runtime_error("sample exceeds maxval");
      return static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    };
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        std::array<std::uint8_t, 3> px{};
        for (int c = 0; c < (color ? 3 : 1); ++c) {
          px[c] = scale(binary ? rd.byte() : rd.token_int());
        }
        if (!color) px[1] = px[2] = px[0];
        img.set(x, y, px[0], px[1], px[2]);
      }
    }
    return img;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::decode_error, std::string("netpbm decode failed: ") + e.what());
  }
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Built-in extractor

inline constexpr std::size_t kGridSide = 8;
inline constexpr std::size_t kGridCells = kGridSide * kGridSide;
inline constexpr std::size_t kHistogramBins = 8;
inline constexpr std::size_t kBuiltinDim = kGridCells + 3 * kHistogramBins;  // 88

inline double luminance(const std::uint8_t* px) {
  return (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) / 255.0;
}

/// 8x8 bilinear grayscale downsample. Output cell (r, c) samples the source
/// at its center ((c + 0.5) * W / 8 - 0.5, (r + 0.5) * H / 8 - 0.5), clamped.
inline std::array<double, kGridCells> downsample_gray(const Image& img) {
  std::array<double, kGridCells> out{};
  auto sample_axis = [](std::size_t i, std::uint32_t extent) {
    double s = (static_cast<double>(i) + 0.5) * extent / static_cast<double>(kGridSide) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    auto i0 = static_cast<std::uint32_t>(std::floor(s));
    auto i1 = std::min(i0 + 1, extent - 1);
    return std::tuple{i0, i1, s - i0};
  };
  for (std::size_t r = 0; r < kGridSide; ++r) {
    auto [y0, y1, fy] = sample_axis(r, img.height);
    for (std::size_t c = 0; c < kGridSide; ++c) {
      auto [x0, x1, fx] = sample_axis(c, img.width);
      const double top = (1 - fx) * luminance(img.at(x0, y0)) + fx * luminance(img.at(x1, y0));
      const double bot = (1 - fx) * luminance(img.at(x0, y1)) + fx * luminance(img.at(x1, y1));
      out[r * kGridSide + c] = (1 - fy) * top + fy * bot;
    }
  }
  return out;
}

/// 88-D descriptor: 64 grayscale cells then 8-bin R, G, B histograms
/// (pixel fractions), L2-normalized. An all-zero raw vector stays zero.
inline std::vector<double> extract(const Image& img) {
  if (img.width == 0 || img.height == 0) {
    throw Error(ErrorCode::decode_error, "empty image");
  }
  std::vector<double> v(kBuiltinDim, 0.0);
  auto gray = downsample_gray(img);
  std::copy(gray.begin(), gray.end(), v.begin());
  const double n = static_cast<double>(img.width) * img.height;
  for (std::uint32_t y = 0; y < img.height; ++y) {
    for (std::uint32_t x = 0; x < img.width; ++x) {
      const auto* px = img.at(x, y);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        v[kGridCells + ch * kHistogramBins + (px[ch] >> 5)] += 1.0 / n;
      }
    }
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
  return v;
}

inline std::vector<double> extract_bytes(std::span<const std::uint8_t> bytes, const std::string& image_id) {
  try {
    return extract(decode_image(bytes));
  } catch (const Error& e) {
    throw Error(ErrorCode::decode_error, "extraction failed for image '" + image_id + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

enum class FeatureKind { builtin, external };

inline const char* to_string(FeatureKind k) { return k == FeatureKind::builtin ? "builtin" : "external"; }

struct MatrixIngestReport {
  std::size_t count = 0;
  std::vector<std::string> rejected;
};

/// Feature vectors keyed by image id; all share one dimension.
class FeatureTable {
 public:
  std::size_t dim() const { return dim_; }
  FeatureKind kind() const { return kind_; }
  std::size_t size() const { return vectors_.size(); }
  bool empty() const { return vectors_.empty(); }

  const std::vector<double>* find(const std::string& id) const {
    auto it = vectors_.find(id);
    return it == vectors_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, std::vector<double>>& all() const { return vectors_; }

  void attach(const std::string& id, std::vector<double> values, FeatureKind kind) {
    if (!vectors_.empty() && values.size() != dim_) {
      throw Error(ErrorCode::dimension_mismatch,
                  "feature dimension " + std::to_string(values.size()) +
                      " conflicts with collection dimension " + std::to_string(dim_));
    }
    if (!vectors_.empty() && kind != kind_) {
      throw Error(ErrorCode::conflict, "cannot mix builtin and external features in one collection");
    }
    for (double x : values) {
      if (!std::isfinite(x)) throw Error(ErrorCode::invalid_argument, "non-finite feature for '" + id + "'");
    }
    dim_ = values.size();
    kind_ = kind;
    vectors_[id] = std::move(values);
    ++revision_;
  }

  void clear() {
    vectors_.clear();
    dim_ = 0;
    ++revision_;
  }

  /// Changes whenever the table changes; part of projection cache keys.
  std::uint64_t fingerprint() const {
    detail::Fnv1a h;
    h.add_value<std::uint64_t>(dim_);
    h.add_value<int>(static_cast<int>(kind_));
    for (const auto& [id, v] : vectors_) {
      h.add(id);
      h.add(v.data(), v.size() * sizeof(double));
    }
    return h.value();
  }

  std::uint64_t revision() const { return revision_; }

 private:
  std::map<std::string, std::vector<double>> vectors_;
  std::size_t dim_ = 0;
  FeatureKind kind_ = FeatureKind::external;
  std::uint64_t revision_ = 0;
};

// ---------------------------------------------------------------------------
// Binary matrix: "HLFM" | n u64 | D u32, then n rows of
// (id length u16, id bytes, D float32), all little-endian.

inline constexpr char kMatrixMagic[4] = {'H', 'L', 'F', 'M'};

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_le(out, bits);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  float f32() {
    auto bits = le<std::uint32_t>();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (b_.size() - pos_ < n) throw Error(ErrorCode::dimension_mismatch, "truncated binary payload");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct MatrixRow {
  std::string id;
  std::vector<double> values;
};

inline std::vector<std::uint8_t> encode_matrix(const std::vector<MatrixRow>& rows, std::uint32_t dim) {
  std::vector<std::uint8_t> out(kMatrixMagic, kMatrixMagic + 4);
  detail::put_le<std::uint64_t>(out, rows.size());
  detail::put_le<std::uint32_t>(out, dim);
  for (const auto& r : rows) {
    if (r.values.size() != dim) throw Error(ErrorCode::dimension_mismatch, "row '" + r.id + "' has wrong length");
    if (r.id.size() > 0xffff) throw Error(ErrorCode::invalid_argument, "id too long");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    for (double v : r.values) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

struct DecodedMatrix {
  std::uint32_t dim = 0;
  std::vector<MatrixRow> rows;
};

inline DecodedMatrix decode_matrix(std::span<const std::uint8_t> bytes) {
  detail::ByteReader rd(bytes);
  if (rd.str(4) != std::string(kMatrixMagic, 4)) {
    throw Error(ErrorCode::decode_error, "bad feature matrix magic");
  }
  auto n = rd.le<std::uint64_t>();
  DecodedMatrix m;
  m.dim = rd.le<std::uint32_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    MatrixRow row;
    auto len = rd.le<std::uint16_t>();
    row.id = rd.str(len);
    row.values.resize(m.dim);
    for (auto& v : row.values) v = rd.f32();
    m.rows.push_back(std::move(row));
  }
  if (rd.remaining() != 0) {
    throw Error(ErrorCode::dimension_mismatch, "feature matrix payload longer than header declares");
  }
  return m;
}

/// Attaches matrix rows to known images. Rows with unknown ids or non-finite
/// values are rejected individually; a dimension that conflicts with vectors
/// already in the table rejects the whole file.
inline MatrixIngestReport ingest_matrix(FeatureTable& table, std::span<const std::uint8_t> bytes,
                                        const std::function<bool(const std::string&)>& known_id) {
  auto m = decode_matrix(bytes);
  if (!table.empty() && m.dim != table.dim()) {
    throw Error(ErrorCode::dimension_mismatch,
                "matrix dimension " + std::to_string(m.dim) + " conflicts with collection dimension " +
                    std::to_string(table.dim()));
  }
  if (!table.empty() && table.kind() != FeatureKind::external) {
    throw Error(ErrorCode::conflict, "collection holds builtin features; clear it before importing");
  }
  MatrixIngestReport report;
  for (auto& row : m.rows) {
    if (!known_id(row.id)) {
      report.rejected.push_back(row.id + ": unknown image id");
      continue;
    }
    bool finite = std::all_of(row.values.begin(), row.values.end(), [](double v) { return std::isfinite(v); });
    if (!finite) {
      report.rejected.push_back(row.id + ": non-finite value");
      continue;
    }
    table.attach(row.id, std::move(row.values), FeatureKind::external);
    ++report.count;
  }
  return report;
}

}  // namespace hilab
