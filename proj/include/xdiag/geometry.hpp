#pragma once

// Modality-gap geometry: per-pair gaps, magnitude/direction/orthogonality/center
// statistics at individual and class level, and the gap-closing transform.

#include "xdiag/common.hpp"
#include "xdiag/store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

namespace xdiag {

/// Below this norm the mean gap has no usable direction.
inline constexpr double kZeroGapNorm = 1e-12;

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(v.size()));
  return s;
}

/// Column mean with a fixed row-order reduction.
inline Vector column_mean(const Matrix& m) {
  Vector mean = Vector::Zero(m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) mean += m.row(i).transpose();
  return mean / static_cast<double>(m.rows());
}

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  const double c = a.dot(b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

struct PairGaps {
  Matrix gaps;
  Vector mean_gap;
};

inline PairGaps pair_gaps(const EmbeddingStore& img, const EmbeddingStore& txt) {
  if (img.rows() != txt.rows() || img.cols() != txt.cols())
    throw DataError("shape mismatch: image store is " + std::to_string(img.rows()) + "x" +
                    std::to_string(img.cols()) + ", text store is " + std::to_string(txt.rows()) + "x" +
                    std::to_string(txt.cols()));
  PairGaps out;
  out.gaps = img.matrix - txt.matrix;
  out.mean_gap = column_mean(out.gaps);
  return out;
}

struct LevelStats {
  std::size_t count = 0;
  Stat magnitude;
  // Undefined (nullopt) when the reference gap is numerically zero.
  std::optional<Stat> direction;
  std::optional<Stat> orthogonality_image;
  std::optional<Stat> orthogonality_text;
  std::optional<Stat> center_image;
  std::optional<Stat> center_text;
};

struct GapReport {
  Vector mean_gap;
  std::size_t n_pairs = 0;
  std::size_t n_classes = 0;
  LevelStats individual;
  std::optional<LevelStats> class_level;
};

namespace detail {

// gaps: rows are gaps; img/txt: rows are the embeddings the gaps came from.
inline LevelStats level_stats(const Matrix& img, const Matrix& txt, const Matrix& gaps, const Vector& reference) {
  LevelStats out;
  out.count = static_cast<std::size_t>(gaps.rows());
  std::vector<double> mags;
  for (Eigen::Index i = 0; i < gaps.rows(); ++i) mags.push_back(gaps.row(i).norm());
  out.magnitude = summarize(mags);

  const double ref_norm = reference.norm();
  if (ref_norm < kZeroGapNorm) return out;
  const Vector unit = reference / ref_norm;

  std::vector<double> dir;
  for (Eigen::Index i = 0; i < gaps.rows(); ++i) dir.push_back(cosine(gaps.row(i).transpose(), reference));
  out.direction = summarize(dir);

  auto orthogonality = [&](const Matrix& u) {
    const Vector mu = column_mean(u);
    std::vector<double> c;
    for (Eigen::Index i = 0; i < u.rows(); ++i) c.push_back(cosine(u.row(i).transpose() - mu, reference));
    return summarize(c);
  };
  // Per-dimension means of u - (u.g')g', pooled over the d dimensions.
  auto center = [&](const Matrix& u) {
    Vector acc = Vector::Zero(u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const Vector row = u.row(i).transpose();
      acc += row - row.dot(unit) * unit;
    }
    acc /= static_cast<double>(u.rows());
    return summarize(std::vector<double>(acc.data(), acc.data() + acc.size()));
  };
  out.orthogonality_image = orthogonality(img);
  out.orthogonality_text = orthogonality(txt);
  out.center_image = center(img);
  out.center_text = center(txt);
  return out;
}

}  // namespace detail

/// Geometry statistics for aligned image/text pairs. Class-level statistics use
/// the image store's labels (multi-label rows contribute to every listed class).
inline GapReport gap_report(const EmbeddingStore& img, const EmbeddingStore& txt) {
  const PairGaps pg = pair_gaps(img, txt);
  GapReport r;
  r.mean_gap = pg.mean_gap;
  r.n_pairs = static_cast<std::size_t>(img.rows());
  r.individual = detail::level_stats(img.matrix, txt.matrix, pg.gaps, pg.mean_gap);

  const StoreMeta& meta = img.meta.has_labels() ? img.meta : txt.meta;
  if (!meta.has_labels()) return r;
  const std::size_t n_classes = meta.class_names.size();
  std::vector<Vector> xs(n_classes, Vector::Zero(img.cols()));
  std::vector<Vector> ys(n_classes, Vector::Zero(img.cols()));
  std::vector<std::size_t> counts(n_classes, 0);
  auto add = [&](Eigen::Index i, int c) {
    xs[static_cast<std::size_t>(c)] += img.matrix.row(i).transpose();
    ys[static_cast<std::size_t>(c)] += txt.matrix.row(i).transpose();
    ++counts[static_cast<std::size_t>(c)];
  };
  for (Eigen::Index i = 0; i < img.rows(); ++i) {
    if (meta.multilabel()) {
      for (int c : meta.multi()[static_cast<std::size_t>(i)]) add(i, c);
    } else {
      add(i, meta.single()[static_cast<std::size_t>(i)]);
    }
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < n_classes; ++c)
    if (counts[c] > 0) present.push_back(c);
  if (present.empty()) return r;
  const auto k = static_cast<Eigen::Index>(present.size());
  Matrix xc(k, img.cols()), yc(k, img.cols());
  for (Eigen::Index j = 0; j < k; ++j) {
    const std::size_t c = present[static_cast<std::size_t>(j)];
    xc.row(j) = (xs[c] / static_cast<double>(counts[c])).transpose();
    yc.row(j) = (ys[c] / static_cast<double>(counts[c])).transpose();
  }
  const Matrix gc = xc - yc;
  r.n_classes = present.size();
  r.class_level = detail::level_stats(xc, yc, gc, column_mean(gc));
  return r;
}

struct ClosedStore {
  EmbeddingStore store;
  Vector mean;
};

/// Subtracts the column mean; no re-normalization.
inline ClosedStore close_gap(const EmbeddingStore& s) {
  ClosedStore out{s, column_mean(s.matrix)};
  out.store.matrix.rowwise() -= out.mean.transpose();
  out.store.normalized = false;
  return out;
}

inline nlohmann::json to_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.std}}; }

inline nlohmann::json to_json(const std::optional<Stat>& s) {
  if (!s) return "undefined";
  return to_json(*s);
}

inline nlohmann::json to_json(const LevelStats& l) {
  return {{"count", l.count},
          {"magnitude", to_json(l.magnitude)},
          {"direction", to_json(l.direction)},
          {"orthogonality", {{"image", to_json(l.orthogonality_image)}, {"text", to_json(l.orthogonality_text)}}},
          {"center", {{"image", to_json(l.center_image)}, {"text", to_json(l.center_text)}}}};
}

inline nlohmann::json to_json(const GapReport& r) {
  nlohmann::json j;
  j["mean_gap"] = std::vector<double>(r.mean_gap.data(), r.mean_gap.data() + r.mean_gap.size());
  j["mean_gap_norm"] = r.mean_gap.norm();
  j["n_pairs"] = r.n_pairs;
  j["n_classes"] = r.n_classes;
  j["individual"] = to_json(r.individual);
  j["class"] = r.class_level ? to_json(*r.class_level) : nlohmann::json(nullptr);
  return j;
}

/// One row per (level, statistic, modality).
inline std::string to_csv(const GapReport& r) {
  std::ostringstream os;
  os << "level,statistic,modality,mean,std\n";
  auto row = [&](const char* level, const char* stat, const char* mod, const std::optional<Stat>& s) {
    os << level << ',' << stat << ',' << mod << ',';
    if (s) {
      os << format_double(s->mean) << ',' << format_double(s->std) << '\n';
    } else {
      os << "undefined,undefined\n";
    }
  };
  auto level = [&](const char* name, const LevelStats& l) {
    row(name, "magnitude", "pair", l.magnitude);
    row(name, "direction", "pair", l.direction);
    row(name, "orthogonality", "image", l.orthogonality_image);
    row(name, "orthogonality", "text", l.orthogonality_text);
    row(name, "center", "image", l.center_image);
    row(name, "center", "text", l.center_text);
  };
  level("individual", r.individual);
  if (r.class_level) level("class", *r.class_level);
  return os.str();
}

}  // namespace xdiag
