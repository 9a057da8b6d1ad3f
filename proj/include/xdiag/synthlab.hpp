#pragma once

// Synthetic embedding worlds and numerical certificates:
//  - constant-gap worlds where the gap is orthogonal to the image span and the
//    images are centered off the gap direction,
//  - planted spurious-correlation scenarios with a token-additive text encoder,
//  - the graph-factorization loss identity and the class-mean transfer head.

#include "xdiag/common.hpp"
#include "xdiag/prompts.hpp"
#include "xdiag/store.hpp"
#include "xdiag/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

namespace xdiag {

namespace detail {

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

/// Random orthonormal basis (columns), deterministic per generator state.
inline Eigen::MatrixXd orthonormal_basis(Eigen::Index d, std::mt19937_64& rng) {
  const Eigen::MatrixXd a = gaussian(d, d, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  return qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
}

/// Largest power of two not exceeding v (v > 0).
inline double pow2_floor(double v) { return std::ldexp(1.0, std::ilogb(v)); }

}  // namespace detail

// ---- constant-gap world -------------------------------------------------------

struct Prop1Params {
  int d = 32;
  int n = 500;
  int classes = 4;
  double gap_norm = 0.8;
  double tau = 0.5;  // image offset along the gap direction, in units of gap_norm
  double class_separation = 1.0;
  double noise = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 1) throw ConfigError("classes must be >= 1");
    if (d < classes + 2) throw ConfigError("d must be >= classes + 2");
    if (n < 1) throw ConfigError("n must be >= 1");
    if (noise < 0.0) throw ConfigError("noise must be >= 0");
    if (!(gap_norm > 0.0)) throw ConfigError("gap_norm must be > 0");
  }
};

struct Prop1World {
  EmbeddingStore image;
  EmbeddingStore text;
  Vector gap;
  Eigen::Index gap_axis = 0;
};

/// Paired stores with x_i = z_i + tau*gap and y_i = x_i - gap, where the z_i lie
/// in the subspace orthogonal to the gap and have exactly zero mean.
///
/// The gap direction is a signed coordinate axis and every coordinate is snapped
/// to a power-of-two grid fine enough for float32, so the hypotheses hold
/// exactly both in memory and after an EMB1 round trip.
inline Prop1World gen_prop1(const Prop1Params& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  const Eigen::Index d = p.d;
  const Eigen::Index axis = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(d));
  const double sign = (rng() & 1u) ? 1.0 : -1.0;

  std::vector<int> labels(static_cast<std::size_t>(p.n));
  for (int i = 0; i < p.n; ++i) labels[static_cast<std::size_t>(i)] = i % p.classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  Matrix centers = detail::gaussian(p.classes, d, rng);
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    centers(c, axis) = 0.0;
    centers.row(c) *= p.class_separation / std::max(centers.row(c).norm(), 1e-12);
  }
  Matrix z = detail::gaussian(p.n, d, rng, p.noise);
  for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) += centers.row(labels[static_cast<std::size_t>(i)]);
  z.col(axis).setZero();

  // Grid step: 2^-22 of the magnitude bound keeps every value exact in float32.
  const double bound = std::max({z.cwiseAbs().maxCoeff(), std::abs(p.tau * p.gap_norm), p.gap_norm, 1.0}) * 4.0;
  const double step = detail::pow2_floor(bound) * std::ldexp(1.0, -22);
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> q(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) q.data()[i] = std::llround(z.data()[i] / step);
  // Exact zero column means in grid units: subtract the floor mean, then spread the remainder.
  for (Eigen::Index j = 0; j < d; ++j) {
    std::int64_t sum = q.col(j).sum();
    const std::int64_t n = p.n;
    std::int64_t base = sum >= 0 ? sum / n : -((-sum + n - 1) / n);
    std::int64_t rem = sum - base * n;  // 0 <= rem < n
    for (Eigen::Index i = 0; i < q.rows(); ++i) q(i, j) -= base + (i < rem ? 1 : 0);
  }
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<double>(q.data()[i]) * step;

  const double gap_len = std::round(p.gap_norm / step) * step;
  const double offset = std::round(p.tau * p.gap_norm / step) * step;
  Prop1World w;
  w.gap_axis = axis;
  w.gap = Vector::Zero(d);
  w.gap(axis) = sign * gap_len;

  w.image.matrix = z;
  w.image.matrix.col(axis).setConstant(sign * offset);
  w.text.matrix = w.image.matrix;
  w.text.matrix.col(axis).setConstant(sign * (offset - gap_len));
  w.image.modality = Modality::image;
  w.text.modality = Modality::text;
  StoreMeta meta;
  meta.labels = labels;
  for (int c = 0; c < p.classes; ++c) meta.class_names.push_back("class" + std::to_string(c));
  meta.ids.emplace();
  for (int i = 0; i < p.n; ++i) meta.ids->push_back("pair" + std::to_string(i));
  meta.source = "synth prop1 seed " + std::to_string(p.seed);
  w.image.meta = meta;
  w.text.meta = meta;
  return w;
}

// ---- token-additive text encoder -----------------------------------------------

/// Text encoder for synthetic worlds: the embedding of a prompt is the sum of
/// its assigned tokens' vectors plus a fixed offset plus seeded per-prompt
/// noise. Unassigned (absent) families contribute nothing.
struct TokenWorld {
  std::map<std::string, std::map<std::string, Vector>> tokens;  // family -> value -> vector
  Vector offset;
  double noise = 0.0;
  std::uint64_t seed = 0;

  Vector embed(const Prompt& p) const {
    Vector v = offset;
    for (const auto& [fam, value] : p.assignment) {
      auto f = tokens.find(fam);
      if (f == tokens.end()) continue;
      auto t = f->second.find(value);
      if (t != f->second.end()) v += t->second;
    }
    if (noise > 0.0) {
      std::mt19937_64 rng(mix_seed(seed, fnv1a(p.text)));
      std::normal_distribution<double> nd(0.0, noise);
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) += nd(rng);
    }
    return v;
  }

  TextEmbedFn embedder() const {
    auto self = std::make_shared<const TokenWorld>(*this);
    return [self](const Prompt& p) { return self->embed(p); };
  }
};

// ---- planted spurious-correlation scenario -------------------------------------

struct PlantedParams {
  int n_classes = 2;
  int n_nuisance = 2;
  double correlation = 0.95;
  std::vector<std::pair<int, int>> unseen_combos;  // (class, nuisance) absent from training
  int n_train = 4000;
  int n_val = 1000;
  int d = 16;
  double class_scale = 2.0;
  double nuisance_scale = 3.0;
  double noise = 0.5;
  double text_noise = -1.0;  // < 0 means 0.01 * class_scale
  double gap_norm = 1.0;
  std::uint64_t seed = 0;

  double effective_text_noise() const { return text_noise < 0.0 ? 0.01 * class_scale : text_noise; }

  void validate() const {
    if (n_classes < 2 || n_nuisance < 2) throw ConfigError("planted scenario needs >= 2 classes and >= 2 nuisance values");
    if (!(correlation > 0.5 && correlation <= 1.0)) throw ConfigError("correlation must lie in (0.5, 1]");
    if (d < n_classes + n_nuisance + 1) throw ConfigError("d must be >= classes + nuisance values + 1");
    if (n_train < 1 || n_val < 1) throw ConfigError("n_train and n_val must be >= 1");
    if (noise < 0.0) throw ConfigError("noise must be >= 0");
    for (const auto& [c, b] : unseen_combos) {
      if (c < 0 || c >= n_classes || b < 0 || b >= n_nuisance) throw ConfigError("unseen combo out of range");
    }
    for (int c = 0; c < n_classes; ++c) {
      int blocked = 0;
      for (int b = 0; b < n_nuisance; ++b)
        blocked += std::count(unseen_combos.begin(), unseen_combos.end(), std::make_pair(c, b)) > 0 ? 1 : 0;
      if (blocked == n_nuisance) throw ConfigError("unseen combos cover every nuisance value of class " + std::to_string(c));
    }
  }

  /// Nuisance value that co-occurs with class c in the majority of training data.
  int majority_nuisance(int c) const { return c % n_nuisance; }
};

inline constexpr const char* kPlantedClassFamily = "category";
inline constexpr const char* kPlantedNuisanceFamily = "background";

struct PlantedWorld {
  EmbeddingStore train;
  EmbeddingStore val;
  AttributeSchema schema;
  std::vector<std::string> templates;
  TokenWorld text;
  Vector gap;
  PlantedParams params;

  TextEmbedFn text_embed() const { return text.embedder(); }

  /// (class, nuisance) pairs that are not the majority combination of their class.
  std::vector<std::pair<int, int>> minority_combos() const {
    std::vector<std::pair<int, int>> out;
    for (int c = 0; c < params.n_classes; ++c)
      for (int b = 0; b < params.n_nuisance; ++b)
        if (b != params.majority_nuisance(c)) out.emplace_back(c, b);
    return out;
  }

  Assignment combo_assignment(int c, int b) const {
    return {{kPlantedClassFamily, schema.families[0].values[static_cast<std::size_t>(c)]},
            {kPlantedNuisanceFamily, schema.families[1].values[static_cast<std::size_t>(b)]}};
  }
};

/// Images x = mu_c + nu_b + noise; texts of an assignment are the sum of its
/// token vectors minus the gap plus small noise. Class, nuisance and gap
/// directions are mutually orthogonal.
inline PlantedWorld gen_planted(const PlantedParams& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  const Eigen::MatrixXd basis = detail::orthonormal_basis(p.d, rng);
  std::vector<Vector> mu, nu;
  for (int c = 0; c < p.n_classes; ++c) mu.push_back(p.class_scale * basis.col(c));
  for (int b = 0; b < p.n_nuisance; ++b) nu.push_back(p.nuisance_scale * basis.col(p.n_classes + b));
  const Vector gap = p.gap_norm * basis.col(p.n_classes + p.n_nuisance);

  std::vector<std::string> class_values, nuisance_values;
  for (int c = 0; c < p.n_classes; ++c) class_values.push_back("c" + std::to_string(c));
  for (int b = 0; b < p.n_nuisance; ++b) nuisance_values.push_back("b" + std::to_string(b));

  PlantedWorld w;
  w.params = p;
  w.gap = gap;
  w.schema = make_schema({{kPlantedClassFamily, class_values}, {kPlantedNuisanceFamily, nuisance_values}},
                         kPlantedClassFamily, class_values);
  w.templates = {"a photo of a {category}[ on the {background}]."};

  auto unseen = [&](int c, int b) {
    return std::find(p.unseen_combos.begin(), p.unseen_combos.end(), std::make_pair(c, b)) != p.unseen_combos.end();
  };
  auto make_store = [&](const std::vector<std::pair<int, int>>& combos, const std::string& tag) {
    EmbeddingStore s;
    s.modality = Modality::image;
    s.matrix = detail::gaussian(static_cast<Eigen::Index>(combos.size()), p.d, rng, p.noise);
    SingleLabels labels;
    std::vector<std::string> cls, bg;
    s.meta.ids.emplace();
    for (std::size_t i = 0; i < combos.size(); ++i) {
      const auto [c, b] = combos[i];
      s.matrix.row(static_cast<Eigen::Index>(i)) += (mu[static_cast<std::size_t>(c)] + nu[static_cast<std::size_t>(b)]).transpose();
      labels.push_back(c);
      cls.push_back(class_values[static_cast<std::size_t>(c)]);
      bg.push_back(nuisance_values[static_cast<std::size_t>(b)]);
      s.meta.ids->push_back(tag + std::to_string(i));
    }
    s.meta.labels = std::move(labels);
    s.meta.class_names = class_values;
    s.meta.attributes[kPlantedClassFamily] = std::move(cls);
    s.meta.attributes[kPlantedNuisanceFamily] = std::move(bg);
    s.meta.source = "synth planted seed " + std::to_string(p.seed) + " " + tag;
    return s;
  };

  std::vector<std::pair<int, int>> train_combos;
  std::uniform_int_distribution<int> pick_class(0, p.n_classes - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  while (static_cast<int>(train_combos.size()) < p.n_train) {
    const int c = pick_class(rng);
    int b = p.majority_nuisance(c);
    if (unif(rng) >= p.correlation) {
      std::uniform_int_distribution<int> other(0, p.n_nuisance - 2);
      b = other(rng);
      if (b >= p.majority_nuisance(c)) ++b;
    }
    if (unseen(c, b)) continue;
    train_combos.emplace_back(c, b);
  }
  std::vector<std::pair<int, int>> val_combos;
  for (int i = 0; i < p.n_val; ++i) {
    const int k = i % (p.n_classes * p.n_nuisance);
    val_combos.emplace_back(k / p.n_nuisance, k % p.n_nuisance);
  }
  w.train = make_store(train_combos, "train");
  w.val = make_store(val_combos, "val");

  w.text.offset = -gap;
  w.text.noise = p.effective_text_noise();
  w.text.seed = mix_seed(p.seed, 0x7e47);
  for (int c = 0; c < p.n_classes; ++c) w.text.tokens[kPlantedClassFamily][class_values[static_cast<std::size_t>(c)]] = mu[static_cast<std::size_t>(c)];
  for (int b = 0; b < p.n_nuisance; ++b)
    w.text.tokens[kPlantedNuisanceFamily][nuisance_values[static_cast<std::size_t>(b)]] = nu[static_cast<std::size_t>(b)];
  return w;
}

inline nlohmann::json to_json(const PlantedParams& p) {
  nlohmann::json unseen = nlohmann::json::array();
  for (const auto& [c, b] : p.unseen_combos) unseen.push_back({c, b});
  return {{"n_classes", p.n_classes}, {"n_nuisance", p.n_nuisance}, {"correlation", p.correlation},
          {"unseen_combos", unseen},  {"n_train", p.n_train},       {"n_val", p.n_val},
          {"d", p.d},                 {"class_scale", p.class_scale}, {"nuisance_scale", p.nuisance_scale},
          {"noise", p.noise},         {"text_noise", p.text_noise}, {"gap_norm", p.gap_norm},
          {"seed", p.seed}};
}

inline PlantedParams planted_params_from_json(const nlohmann::json& j) {
  PlantedParams p;
  try {
    p.n_classes = j.value("n_classes", p.n_classes);
    p.n_nuisance = j.value("n_nuisance", p.n_nuisance);
    p.correlation = j.value("correlation", p.correlation);
    if (j.contains("unseen_combos"))
      for (const auto& u : j["unseen_combos"]) p.unseen_combos.emplace_back(u.at(0).get<int>(), u.at(1).get<int>());
    p.n_train = j.value("n_train", p.n_train);
    p.n_val = j.value("n_val", p.n_val);
    p.d = j.value("d", p.d);
    p.class_scale = j.value("class_scale", p.class_scale);
    p.nuisance_scale = j.value("nuisance_scale", p.nuisance_scale);
    p.noise = j.value("noise", p.noise);
    p.text_noise = j.value("text_noise", p.text_noise);
    p.gap_norm = j.value("gap_norm", p.gap_norm);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid scenario parameters: ") + e.what());
  }
  return p;
}

// ---- graph factorization identities --------------------------------------------

/// L = -2 sum p(x,z) f.g + NM E_{x~Px, z~Pz}[(f.g)^2], marginals taken from P.
inline double spectral_loss(const Matrix& prob, const Matrix& f, const Matrix& g) {
  require(prob.rows() == f.rows() && prob.cols() == g.rows() && f.cols() == g.cols(), "spectral_loss: shape mismatch");
  const Matrix s = f * g.transpose();
  const Vector px = prob.rowwise().sum();
  const Vector pz = prob.colwise().sum().transpose();
  const auto n = static_cast<double>(prob.rows());
  const auto m = static_cast<double>(prob.cols());
  double cross = 0.0, quad = 0.0;
  for (Eigen::Index x = 0; x < prob.rows(); ++x)
    for (Eigen::Index z = 0; z < prob.cols(); ++z) {
      cross += prob(x, z) * s(x, z);
      quad += px(x) * pz(z) * s(x, z) * s(x, z);
    }
  return -2.0 * cross + n * m * quad;
}

/// Average of k random permutation matrices scaled by 1/N: every row and column sums to 1/N.
inline Matrix permutation_mixture(Eigen::Index n, int k, std::mt19937_64& rng) {
  Matrix p = Matrix::Zero(n, n);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  for (int r = 0; r < k; ++r) {
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Eigen::Index i = 0; i < n; ++i) p(i, perm[static_cast<std::size_t>(i)]) += 1.0;
  }
  return p / (static_cast<double>(k) * static_cast<double>(n));
}

struct SpectralCheck {
  double residual = 0.0;
  double loss = 0.0;
  double frobenius = 0.0;  // ||P - F G^T||_F^2
  double sum_p2 = 0.0;
};

inline SpectralCheck spectral_identity(const Matrix& prob, const Matrix& f, const Matrix& g) {
  SpectralCheck c;
  c.loss = spectral_loss(prob, f, g);
  c.frobenius = (prob - f * g.transpose()).squaredNorm();
  c.sum_p2 = prob.squaredNorm();
  c.residual = std::abs(c.frobenius - (c.loss + c.sum_p2));
  return c;
}

/// Residual of ||P - F G^T||_F^2 = L + sum p^2 on a random uniform-marginal
/// graph of N images and N texts with D-dimensional factors.
inline SpectralCheck spectral_identity_check(int n, int dim, std::uint64_t seed, int mixtures = 3) {
  if (n < 2) throw ConfigError("N must be >= 2");
  if (dim < 1) throw ConfigError("D must be >= 1");
  std::mt19937_64 rng(seed);
  const Matrix prob = permutation_mixture(n, mixtures, rng);
  const Matrix f = detail::gaussian(n, dim, rng);
  const Matrix g = detail::gaussian(n, dim, rng);
  return spectral_identity(prob, f, g);
}

struct ClassMeanCheck {
  double residual = 0.0;
  Matrix head;    // D x C, M * F^T Y_x
  Matrix output;  // M x C, G * head
  int attempts = 0;
};

struct ClassMeanParams {
  int n = 8;        // images
  int m = 6;        // texts
  int d = 12;       // factor dimension, >= n
  int classes = 2;
  std::uint64_t seed = 0;
  bool violate = false;  // move one text's mass on one image to another class
};

/// Builds a class-blocked P satisfying P^T Y_x = Y_z / M, a full-row-rank F,
/// and G^T = F^T (F F^T)^{-1} P so that F G^T = P; returns max |G (M F^T Y_x) - Y_z|.
inline ClassMeanCheck classmean_check(const ClassMeanParams& p) {
  if (p.classes < 1 || p.n < p.classes || p.m < p.classes) throw ConfigError("need at least one image and one text per class");
  if (p.d < p.n) throw ConfigError("D must be >= N");
  std::mt19937_64 rng(p.seed);
  std::vector<int> img_class(static_cast<std::size_t>(p.n)), txt_class(static_cast<std::size_t>(p.m));
  for (int i = 0; i < p.n; ++i) img_class[static_cast<std::size_t>(i)] = i % p.classes;
  for (int j = 0; j < p.m; ++j) txt_class[static_cast<std::size_t>(j)] = j % p.classes;
  std::shuffle(img_class.begin(), img_class.end(), rng);
  std::shuffle(txt_class.begin(), txt_class.end(), rng);
  std::vector<int> per_class(static_cast<std::size_t>(p.classes), 0);
  for (int c : img_class) ++per_class[static_cast<std::size_t>(c)];

  Matrix prob = Matrix::Zero(p.n, p.m);
  for (int j = 0; j < p.m; ++j) {
    const int c = txt_class[static_cast<std::size_t>(j)];
    for (int i = 0; i < p.n; ++i)
      if (img_class[static_cast<std::size_t>(i)] == c)
        prob(i, j) = 1.0 / (static_cast<double>(p.m) * per_class[static_cast<std::size_t>(c)]);
  }
  if (p.violate) {
    if (p.classes < 2) throw ConfigError("violation needs at least two classes");
    const int c = txt_class[0];
    int from = -1, to = -1;
    for (int i = 0; i < p.n; ++i) {
      if (from < 0 && img_class[static_cast<std::size_t>(i)] == c) from = i;
      if (to < 0 && img_class[static_cast<std::size_t>(i)] != c) to = i;
    }
    prob(to, 0) += prob(from, 0);
    prob(from, 0) = 0.0;
  }
  Matrix yx = Matrix::Zero(p.n, p.classes), yz = Matrix::Zero(p.m, p.classes);
  for (int i = 0; i < p.n; ++i) yx(i, img_class[static_cast<std::size_t>(i)]) = 1.0;
  for (int j = 0; j < p.m; ++j) yz(j, txt_class[static_cast<std::size_t>(j)]) = 1.0;

  ClassMeanCheck out;
  for (int attempt = 1; attempt <= 8; ++attempt) {
    out.attempts = attempt;
    const Matrix f = detail::gaussian(p.n, p.d, rng);
    const Eigen::MatrixXd gram = f * f.transpose();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
    if (lu.rank() < p.n) continue;
    const Matrix gt = f.transpose() * lu.solve(Eigen::MatrixXd(prob));  // D x M
    const Matrix g = gt.transpose();
    out.head = static_cast<double>(p.m) * f.transpose() * yx;
    out.output = g * out.head;
    out.residual = (out.output - yz).cwiseAbs().maxCoeff();
    return out;
  }
  throw DataError("classmean_check: image factor stayed rank deficient after 8 draws");
}

struct ScalingCheck {
  double loss_change = 0.0;
  double gap_before = 0.0;  // || mean f - mean g ||
  double gap_after = 0.0;
};

/// Scaling F by c and G by 1/c leaves F G^T, hence the loss, unchanged while
/// moving the image and text centroids apart.
inline ScalingCheck scaling_check(int n, int dim, double c, std::uint64_t seed) {
  if (!(c > 0.0)) throw ConfigError("scale must be > 0");
  std::mt19937_64 rng(seed);
  const Matrix prob = permutation_mixture(n, 3, rng);
  const Matrix f = detail::gaussian(n, dim, rng);
  const Matrix g = detail::gaussian(n, dim, rng);
  auto centroid_gap = [](const Matrix& a, const Matrix& b) {
    return (a.colwise().mean() - b.colwise().mean()).norm();
  };
  ScalingCheck s;
  s.loss_change = std::abs(spectral_loss(prob, c * f, g / c) - spectral_loss(prob, f, g));
  s.gap_before = centroid_gap(f, g);
  s.gap_after = centroid_gap(c * f, g / c);
  return s;
}

}  // namespace xdiag
