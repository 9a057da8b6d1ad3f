#pragma once

// Embedding store: an n x d matrix of one modality plus per-row metadata.
//
// On disk ("EMB1 v1"):
//   bytes 0-3   "EMB1"
//   byte  4     version (1)
//   byte  5     modality code (0 image, 1 text, 2 other)
//   byte  6     normalized flag
//   byte  7     reserved, 0
//   bytes 8-11  u32 LE rows
//   bytes 12-15 u32 LE cols
//   then rows*cols float32 LE, row-major.
// Metadata lives in a JSON sidecar at "<path>.meta.json".

#include "xdiag/common.hpp"
#include "xdiag/io.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace xdiag {

enum class Modality : std::uint8_t { image = 0, text = 1, other = 2 };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::text: return "text";
    case Modality::other: return "other";
  }
  return "other";
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "image") return Modality::image;
  if (s == "text") return Modality::text;
  if (s == "other") return Modality::other;
  throw ConfigError("unknown modality '" + s + "'");
}

using SingleLabels = std::vector<int>;
using MultiLabels = std::vector<std::vector<int>>;  // each row sorted ascending
using Labels = std::variant<std::monostate, SingleLabels, MultiLabels>;

struct StoreMeta {
  std::optional<std::vector<std::string>> ids;
  Labels labels;
  std::map<std::string, std::vector<std::string>> attributes;
  std::vector<std::string> class_names;
  std::string source;

  bool has_labels() const { return !std::holds_alternative<std::monostate>(labels); }
  bool multilabel() const { return std::holds_alternative<MultiLabels>(labels); }
  const SingleLabels& single() const { return std::get<SingleLabels>(labels); }
  const MultiLabels& multi() const { return std::get<MultiLabels>(labels); }

  bool operator==(const StoreMeta&) const = default;
};

struct EmbeddingStore {
  Matrix matrix;
  Modality modality = Modality::other;
  bool normalized = false;
  StoreMeta meta;

  Eigen::Index rows() const { return matrix.rows(); }
  Eigen::Index cols() const { return matrix.cols(); }
};

inline constexpr double kNormTolerance = 1e-5;

/// Throws DataError describing the first violated invariant.
inline void validate(const EmbeddingStore& s) {
  const auto n = s.matrix.rows();
  require(n >= 1 && s.matrix.cols() >= 1, "store must have at least one row and one column");
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < s.matrix.cols(); ++j) {
      if (!std::isfinite(s.matrix(i, j)))
        throw DataError("non-finite entry at row " + std::to_string(i) + ", column " +
                        std::to_string(j));
    }
    if (s.normalized && std::abs(s.matrix.row(i).norm() - 1.0) > kNormTolerance)
      throw DataError("row " + std::to_string(i) + " is not unit norm but store is flagged normalized");
  }
  const auto& m = s.meta;
  auto check_len = [n](std::size_t len, const std::string& what) {
    if (len != static_cast<std::size_t>(n))
      throw DataError("meta length mismatch: " + what + " has " + std::to_string(len) +
                      " entries, store has " + std::to_string(n) + " rows");
  };
  if (m.ids) check_len(m.ids->size(), "ids");
  const auto n_classes = static_cast<int>(m.class_names.size());
  auto check_label = [n_classes](int c) {
    if (c < 0 || c >= n_classes)
      throw DataError("label " + std::to_string(c) + " outside [0, " + std::to_string(n_classes) + ")");
  };
  if (m.has_labels() && !m.multilabel()) {
    check_len(m.single().size(), "labels");
    for (int c : m.single()) check_label(c);
  } else if (m.multilabel()) {
    check_len(m.multi().size(), "labels");
    for (const auto& row : m.multi()) {
      for (std::size_t k = 0; k < row.size(); ++k) {
        check_label(row[k]);
        if (k > 0 && row[k] <= row[k - 1]) throw DataError("multi-label index sets must be sorted and unique");
      }
    }
  }
  for (const auto& [family, values] : m.attributes) {
    require(!family.empty(), "attribute family name must be non-empty");
    check_len(values.size(), "attribute '" + family + "'");
    for (const auto& v : values)
      require(!v.empty(), "attribute '" + family + "' has an empty value");
  }
}

/// Row-wise l2 normalization. Throws on an all-zero row.
inline Matrix l2_normalize(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm == 0.0) throw DataError("cannot normalize zero row " + std::to_string(i));
    out.row(i) /= norm;
  }
  return out;
}

namespace detail {

inline constexpr std::array<char, 4> kMagic{'E', 'M', 'B', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) buf.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline nlohmann::json labels_to_json(const Labels& labels) {
  if (auto* s = std::get_if<SingleLabels>(&labels)) return *s;
  if (auto* m = std::get_if<MultiLabels>(&labels)) return *m;
  return nullptr;
}

inline Labels labels_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::monostate{};
  require(j.is_array(), "sidecar 'labels' must be an array or null");
  if (j.empty()) return SingleLabels{};
  if (j.front().is_array()) {
    MultiLabels out;
    for (const auto& row : j) {
      std::vector<int> r = row.get<std::vector<int>>();
      out.push_back(std::move(r));
    }
    return out;
  }
  return j.get<SingleLabels>();
}

}  // namespace detail

inline std::string encode_store(const EmbeddingStore& s) {
  std::string buf;
  const auto n = static_cast<std::uint32_t>(s.rows());
  const auto d = static_cast<std::uint32_t>(s.cols());
  buf.reserve(detail::kHeaderBytes + std::size_t{n} * d * 4);
  buf.append(detail::kMagic.data(), 4);
  buf.push_back(static_cast<char>(detail::kVersion));
  buf.push_back(static_cast<char>(s.modality));
  buf.push_back(static_cast<char>(s.normalized ? 1 : 0));
  buf.push_back(0);
  detail::put_u32(buf, n);
  detail::put_u32(buf, d);
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(s.matrix(i, j)));
      detail::put_u32(buf, bits);
    }
  }
  return buf;
}

inline nlohmann::json meta_to_json(const StoreMeta& m) {
  nlohmann::json j;
  j["ids"] = m.ids ? nlohmann::json(*m.ids) : nlohmann::json(nullptr);
  j["labels"] = detail::labels_to_json(m.labels);
  j["attributes"] = m.attributes.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.attributes);
  j["class_names"] = m.class_names.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.class_names);
  j["source"] = m.source;
  return j;
}

inline StoreMeta meta_from_json(const nlohmann::json& j) {
  StoreMeta m;
  require(j.is_object(), "sidecar must be a JSON object");
  if (j.contains("ids") && !j["ids"].is_null()) m.ids = j["ids"].get<std::vector<std::string>>();
  if (j.contains("labels")) m.labels = detail::labels_from_json(j["labels"]);
  if (j.contains("attributes") && !j["attributes"].is_null())
    m.attributes = j["attributes"].get<std::map<std::string, std::vector<std::string>>>();
  if (j.contains("class_names") && !j["class_names"].is_null())
    m.class_names = j["class_names"].get<std::vector<std::string>>();
  if (j.contains("source") && j["source"].is_string()) m.source = j["source"].get<std::string>();
  return m;
}

inline EmbeddingStore decode_store(std::string_view bytes) {
  require(bytes.size() >= detail::kHeaderBytes, "size mismatch: file shorter than header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, detail::kMagic.data(), 4) != 0) throw DataError("bad magic");
  if (p[4] != detail::kVersion) throw DataError("version unsupported: " + std::to_string(p[4]));
  if (p[5] > 2) throw DataError("unknown modality code " + std::to_string(p[5]));
  if (p[6] > 1) throw DataError("normalized flag must be 0 or 1");
  const std::uint32_t n = detail::get_u32(p + 8);
  const std::uint32_t d = detail::get_u32(p + 12);
  const std::uint64_t expected = detail::kHeaderBytes + std::uint64_t{n} * d * 4;
  if (bytes.size() != expected)
    throw DataError("size mismatch: header declares " + std::to_string(n) + "x" + std::to_string(d) +
                    " (" + std::to_string(expected) + " bytes), file has " + std::to_string(bytes.size()));
  EmbeddingStore s;
  s.modality = static_cast<Modality>(p[5]);
  s.normalized = p[6] == 1;
  s.matrix.resize(n, d);
  const unsigned char* data = p + detail::kHeaderBytes;
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < d; ++j) {
      const float v = std::bit_cast<float>(detail::get_u32(data + 4 * (std::size_t{i} * d + j)));
      if (!std::isfinite(v))
        throw DataError("non-finite entry at row " + std::to_string(i) + ", column " + std::to_string(j));
      s.matrix(i, j) = v;
    }
  }
  return s;
}

inline std::string sidecar_path(const std::filesystem::path& path) { return path.string() + ".meta.json"; }

/// Writes the binary store and its sidecar. Validates first; writes are atomic.
inline void write_store(const EmbeddingStore& s, const std::filesystem::path& path) {
  validate(s);
  const auto parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  require(std::filesystem::is_directory(parent), "parent directory does not exist: " + parent.string());
  write_file_atomic(path, encode_store(s));
  write_file_atomic(sidecar_path(path), meta_to_json(s.meta).dump(2) + "\n");
}

/// Reads a store; a missing sidecar yields empty metadata.
inline EmbeddingStore read_store(const std::filesystem::path& path) {
  EmbeddingStore s = decode_store(read_file(path));
  const std::filesystem::path side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(side));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("invalid sidecar " + side.string() + ": " + e.what());
    }
    try {
      s.meta = meta_from_json(j);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("invalid sidecar " + side.string() + ": " + e.what());
    }
  }
  validate(s);
  return s;
}

/// Label of row i for single-label stores.
inline int label_of(const EmbeddingStore& s, Eigen::Index i) { return s.meta.single()[static_cast<std::size_t>(i)]; }

/// Returns the rows selected by `idx` as a new store, metadata sliced accordingly.
inline EmbeddingStore select_rows(const EmbeddingStore& s, const std::vector<Eigen::Index>& idx) {
  EmbeddingStore out;
  out.modality = s.modality;
  out.normalized = s.normalized;
  out.matrix.resize(static_cast<Eigen::Index>(idx.size()), s.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.matrix.row(static_cast<Eigen::Index>(k)) = s.matrix.row(idx[k]);
  const auto& m = s.meta;
  out.meta.class_names = m.class_names;
  out.meta.source = m.source;
  if (m.ids) {
    out.meta.ids.emplace();
    for (auto i : idx) out.meta.ids->push_back((*m.ids)[static_cast<std::size_t>(i)]);
  }
  if (m.has_labels() && !m.multilabel()) {
    SingleLabels l;
    for (auto i : idx) l.push_back(m.single()[static_cast<std::size_t>(i)]);
    out.meta.labels = std::move(l);
  } else if (m.multilabel()) {
    MultiLabels l;
    for (auto i : idx) l.push_back(m.multi()[static_cast<std::size_t>(i)]);
    out.meta.labels = std::move(l);
  }
  for (const auto& [family, values] : m.attributes) {
    auto& dst = out.meta.attributes[family];
    for (auto i : idx) dst.push_back(values[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace xdiag
