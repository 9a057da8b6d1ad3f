#pragma once

// Evaluation metrics and cross-modal prediction consistency.

#include "xdiag/probe.hpp"

#include <json.hpp>

#include <cmath>
#include <vector>

namespace xdiag {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long support = 0;
};

struct EvalReport {
  double loss = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
};

namespace detail {

inline double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

inline double f1_from_counts(double tp, double fp, double fn) { return safe_div(2.0 * tp, 2.0 * tp + fp + fn); }

}  // namespace detail

/// Metrics from predictions against labels. `targets` are what the loss compares
/// against: one-hot (multiclass), multi-hot (multilabel) or balanced targets
/// (quadratic). For multilabel, accuracy is the fraction of correct cells.
inline EvalReport metrics(const Prediction& pred, const Matrix& targets) {
  const Eigen::Index n = pred.rows();
  const Eigen::Index c = pred.scores.cols();
  require(targets.rows() == n && targets.cols() == c, "metrics: shape mismatch");
  EvalReport r;
  std::vector<double> tp(static_cast<std::size_t>(c), 0.0), fp(tp), fn(tp);
  std::vector<long> support(static_cast<std::size_t>(c), 0);
  double correct = 0.0;
  constexpr double tiny = 1e-300;

  if (pred.task == Task::multilabel) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) {
        const bool truth = targets(i, j) > 0.5;
        const bool hit = pred.positives(i, j) != 0;
        const auto k = static_cast<std::size_t>(j);
        if (truth) ++support[k];
        if (truth && hit) tp[k] += 1;
        if (!truth && hit) fp[k] += 1;
        if (truth && !hit) fn[k] += 1;
        if (truth == hit) correct += 1;
        const double p = pred.scores(i, j);
        loss -= truth ? std::log(std::max(p, tiny)) : std::log(std::max(1.0 - p, tiny));
      }
    }
    r.loss = loss / static_cast<double>(n * c);
    r.accuracy = correct / static_cast<double>(n * c);
  } else {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // balanced targets keep the argmax of the one-hot they came from
      const int y = argmax_row(targets, i);
      const int h = pred.classes[static_cast<std::size_t>(i)];
      ++support[static_cast<std::size_t>(y)];
      if (h == y) {
        tp[static_cast<std::size_t>(y)] += 1;
        correct += 1;
      } else {
        fp[static_cast<std::size_t>(h)] += 1;
        fn[static_cast<std::size_t>(y)] += 1;
      }
      if (pred.task == Task::multiclass) {
        loss -= std::log(std::max(pred.scores(i, y), tiny));
      } else {
        loss += (pred.scores.row(i) - targets.row(i)).squaredNorm();
      }
    }
    r.loss = loss / static_cast<double>(n);
    r.accuracy = correct / static_cast<double>(n);
  }

  double stp = 0, sfp = 0, sfn = 0, macro = 0;
  for (std::size_t k = 0; k < static_cast<std::size_t>(c); ++k) {
    ClassMetrics m;
    m.precision = detail::safe_div(tp[k], tp[k] + fp[k]);
    m.recall = detail::safe_div(tp[k], tp[k] + fn[k]);
    m.f1 = detail::f1_from_counts(tp[k], fp[k], fn[k]);
    m.support = support[k];
    macro += m.f1;
    stp += tp[k];
    sfp += fp[k];
    sfn += fn[k];
    r.per_class.push_back(m);
  }
  r.micro_f1 = detail::f1_from_counts(stp, sfp, sfn);
  r.macro_f1 = macro / static_cast<double>(c);
  return r;
}

/// Fraction of agreeing hard predictions: per example for single-label tasks,
/// per (example, label) cell for multilabel.
inline double consistency(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size() && !a.empty(), "consistency: shape mismatch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline double consistency(const Eigen::MatrixXi& a, const Eigen::MatrixXi& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols() && a.size() > 0, "consistency: shape mismatch");
  return static_cast<double>((a.array() == b.array()).count()) / static_cast<double>(a.size());
}

inline double consistency(const Prediction& a, const Prediction& b) {
  require(a.task == b.task, "consistency: task mismatch");
  if (a.task == Task::multilabel) return consistency(a.positives, b.positives);
  return consistency(a.classes, b.classes);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& m : r.per_class)
    pc.push_back({{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}});
  return {{"loss", r.loss}, {"micro_f1", r.micro_f1}, {"macro_f1", r.macro_f1}, {"accuracy", r.accuracy}, {"per_class", pc}};
}

}  // namespace xdiag
