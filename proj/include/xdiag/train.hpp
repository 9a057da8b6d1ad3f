#pragma once

// Mini-batch Adam training with best-validation-loss snapshot selection.

#include "xdiag/geometry.hpp"
#include "xdiag/probe.hpp"
#include "xdiag/store.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace xdiag {

struct TrainingData {
  Matrix x;
  Matrix targets;
};

struct FitResult {
  ProbeModel model;
  int best_epoch = 0;
  std::vector<double> val_losses;
};

namespace detail {

struct AdamState {
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b;
  long step = 0;

  explicit AdamState(const ProbeModel& model) {
    for (const auto& l : model.layers) {
      m_w.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      v_w.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
      const Eigen::Index nb = l.bias ? l.bias->size() : 0;
      m_b.push_back(Vector::Zero(nb));
      v_b.push_back(Vector::Zero(nb));
    }
  }

  void apply(ProbeModel& model, const Gradients& g, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
      param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    for (std::size_t k = 0; k < model.layers.size(); ++k) {
      update(model.layers[k].weight, m_w[k], v_w[k], g.weight[k]);
      if (model.layers[k].bias) update(*model.layers[k].bias, m_b[k], v_b[k], g.bias[k]);
    }
  }
};

inline Matrix gather_rows(const Matrix& m, const std::vector<Eigen::Index>& idx, std::size_t begin, std::size_t end) {
  Matrix out(static_cast<Eigen::Index>(end - begin), m.cols());
  for (std::size_t k = begin; k < end; ++k) out.row(static_cast<Eigen::Index>(k - begin)) = m.row(idx[k]);
  return out;
}

}  // namespace detail

/// Continues training `start` on preprocessed inputs. The returned model is the
/// epoch snapshot with the lowest validation data loss (first such epoch wins).
inline FitResult fit(ProbeModel start, const TrainingData& train, const TrainingData& val, const TrainConfig& cfg) {
  cfg.validate(start.task);
  require(train.x.rows() >= 1, "empty training set");
  require(train.x.rows() == train.targets.rows(), "training inputs and targets differ in row count");
  require(val.x.rows() >= 1 && val.x.rows() == val.targets.rows(), "validation set is empty or misaligned");
  const double l2 = start.task == Task::quadratic ? cfg.ridge_lambda : 0.0;

  ProbeModel model = std::move(start);
  detail::AdamState adam(model);
  std::mt19937_64 rng(cfg.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.x.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  FitResult result{model, 0, {}};
  double best = std::numeric_limits<double>::infinity();
  Gradients grad;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t b = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch, ++b) {
      const std::size_t end = std::min(order.size(), begin + batch);
      const Matrix xb = detail::gather_rows(train.x, order, begin, end);
      const Matrix tb = detail::gather_rows(train.targets, order, begin, end);
      const double loss = loss_and_gradient(model, xb, tb, l2, &grad);
      if (!std::isfinite(loss))
        throw DataError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      adam.apply(model, grad, cfg.learning_rate);
    }
    const double vl = data_loss(model.task, forward(model, val.x), val.targets);
    if (!std::isfinite(vl)) throw DataError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.val_losses.push_back(vl);
    if (vl < best) {
      best = vl;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  result.model.config = cfg;
  return result;
}

/// Target matrix for a labelled store under `task`. For the quadratic task the
/// balanced targets subtract `prior`.
inline Matrix targets_for(const StoreMeta& meta, Task task, Eigen::Index n_classes, const Vector& prior) {
  require(meta.has_labels(), "store has no labels");
  switch (task) {
    case Task::multiclass:
      require(!meta.multilabel(), "multiclass task needs single labels");
      return one_hot(meta.single(), n_classes);
    case Task::multilabel:
      require(meta.multilabel(), "multilabel task needs label index sets");
      return multi_hot(meta.multi(), n_classes);
    case Task::quadratic:
      require(!meta.multilabel(), "quadratic task needs single labels");
      return balanced_targets(meta.single(), prior);
  }
  return {};
}

inline Eigen::Index class_count(const StoreMeta& meta) {
  require(!meta.class_names.empty(), "store metadata lists no class names");
  return static_cast<Eigen::Index>(meta.class_names.size());
}

inline Vector class_prior(const StoreMeta& meta, ClassPrior kind, Eigen::Index n_classes) {
  if (kind == ClassPrior::uniform) return Vector::Constant(n_classes, 1.0 / static_cast<double>(n_classes));
  require(meta.has_labels() && !meta.multilabel(), "empirical class prior needs single labels");
  return empirical_distribution(meta.single(), n_classes);
}

/// Trains a fresh model on `train_store`, selecting the epoch by loss on `val_store`
/// (same modality). With gap closing, both are centered by the training mean.
inline FitResult train_probe(const ProbeSpec& spec, const EmbeddingStore& train_store, const EmbeddingStore& val_store,
                             const TrainConfig& cfg) {
  cfg.validate(spec.task);
  const Eigen::Index n_classes = class_count(train_store.meta);
  require(val_store.cols() == train_store.cols(), "train and validation stores differ in dimension");
  const Vector prior = spec.task == Task::quadratic ? class_prior(train_store.meta, cfg.class_prior, n_classes) : Vector();
  TrainingData tr{train_store.matrix, targets_for(train_store.meta, spec.task, n_classes, prior)};
  TrainingData va{val_store.matrix, targets_for(val_store.meta, spec.task, n_classes, prior)};
  ProbeModel start = init_model(spec, train_store.cols(), n_classes, cfg.seed);
  if (spec.close_gap) {
    const Vector mean = column_mean(train_store.matrix);
    tr.x.rowwise() -= mean.transpose();
    va.x.rowwise() -= mean.transpose();
    GapClosing g;
    g.set(train_store.modality == Modality::text ? Modality::text : Modality::image, mean);
    start.gap_closing = std::move(g);
  }
  FitResult r = fit(std::move(start), tr, va, cfg);
  r.model.seed = cfg.seed;
  return r;
}

}  // namespace xdiag
