#include "xdiag/metrics.hpp"
#include "xdiag/ridge.hpp"
#include "xdiag/synthlab.hpp"
#include "xdiag/train.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <limits>

using namespace xdiag;

namespace {

EmbeddingStore blobs(int n, std::uint64_t seed, double sep = 4.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  EmbeddingStore s;
  s.matrix.resize(n, 5);
  SingleLabels labels;
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    for (int j = 0; j < 5; ++j) s.matrix(i, j) = nd(rng);
    s.matrix(i, 0) += y == 0 ? -sep : sep;
    labels.push_back(y);
  }
  s.meta.labels = labels;
  s.meta.class_names = {"neg", "pos"};
  return s;
}

// Brute-force oracle: confusion counts by enumeration, F1 from precision and recall.
struct BruteF1 {
  double micro, macro;
};

BruteF1 brute_f1_multiclass(const std::vector<int>& truth, const std::vector<int>& pred, int c) {
  std::vector<std::vector<int>> conf(static_cast<std::size_t>(c), std::vector<int>(static_cast<std::size_t>(c), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) conf[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])]++;
  double macro = 0, tp_all = 0, fp_all = 0, fn_all = 0;
  for (int k = 0; k < c; ++k) {
    double tp = conf[k][k], fp = 0, fn = 0;
    for (int j = 0; j < c; ++j) {
      if (j == k) continue;
      fp += conf[j][k];
      fn += conf[k][j];
    }
    const double p = tp + fp == 0 ? 0 : tp / (tp + fp);
    const double r = tp + fn == 0 ? 0 : tp / (tp + fn);
    macro += p + r == 0 ? 0 : 2 * p * r / (p + r);
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  const double p = tp_all + fp_all == 0 ? 0 : tp_all / (tp_all + fp_all);
  const double r = tp_all + fn_all == 0 ? 0 : tp_all / (tp_all + fn_all);
  return {p + r == 0 ? 0 : 2 * p * r / (p + r), macro / c};
}

BruteF1 brute_f1_multilabel(const Matrix& truth, const Eigen::MatrixXi& pred) {
  double macro = 0, tp_all = 0, fp_all = 0, fn_all = 0;
  for (Eigen::Index k = 0; k < truth.cols(); ++k) {
    double tp = 0, fp = 0, fn = 0;
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
      const bool t = truth(i, k) > 0.5, h = pred(i, k) == 1;
      tp += t && h;
      fp += !t && h;
      fn += t && !h;
    }
    const double p = tp + fp == 0 ? 0 : tp / (tp + fp);
    const double r = tp + fn == 0 ? 0 : tp / (tp + fn);
    macro += p + r == 0 ? 0 : 2 * p * r / (p + r);
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  const double p = tp_all + fp_all == 0 ? 0 : tp_all / (tp_all + fp_all);
  const double r = tp_all + fn_all == 0 ? 0 : tp_all / (tp_all + fn_all);
  return {p + r == 0 ? 0 : 2 * p * r / (p + r), macro / static_cast<double>(truth.cols())};
}

ProbeModel random_model(ProbeKind kind, Task task, Eigen::Index in, Eigen::Index out, std::uint64_t seed,
                        std::vector<int> hidden = {7}) {
  ProbeSpec spec;
  spec.kind = kind;
  spec.task = task;
  spec.hidden = std::move(hidden);
  return init_model(spec, in, out, seed);
}

}  // namespace

// ---- targets ------------------------------------------------------------------

TEST(BalancedTargets, UniformTwoClass) {
  const Matrix t = balanced_targets({0}, Vector::Constant(2, 0.5));
  EXPECT_DOUBLE_EQ(t(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(t(0, 1), -0.5);
}

TEST(BalancedTargets, SkewedDistribution) {
  Vector p(2);
  p << 0.9, 0.1;
  const Matrix t = balanced_targets({1}, p);
  EXPECT_DOUBLE_EQ(t(0, 0), -0.9);
  EXPECT_DOUBLE_EQ(t(0, 1), 0.9);
}

TEST(BalancedTargets, BalancedDatasetSumsToZero) {
  std::vector<int> labels;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c) labels.push_back(c);
  const Matrix t = balanced_targets(labels, Vector::Constant(5, 0.2));
  EXPECT_LE(t.colwise().sum().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BalancedTargets, Errors) {
  EXPECT_THROW(balanced_targets({2}, Vector::Constant(2, 0.5)), DataError);
  EXPECT_THROW(balanced_targets({0}, Vector::Constant(2, 0.4)), DataError);
}

TEST(EmpiricalDistribution, Counts) {
  const Vector p = empirical_distribution({0, 0, 0, 1}, 3);
  EXPECT_DOUBLE_EQ(p(0), 0.75);
  EXPECT_DOUBLE_EQ(p(1), 0.25);
  EXPECT_DOUBLE_EQ(p(2), 0.0);
}

// ---- ridge --------------------------------------------------------------------

TEST(Ridge, ZeroTargetsGiveZeroWeights) {
  const ProbeModel m = ridge_fit(test::random_matrix(20, 4, 1), Matrix::Zero(20, 3), 0.1);
  EXPECT_EQ(m.layers[0].weight, Matrix::Zero(3, 4));
  EXPECT_EQ(m.task, Task::quadratic);
  EXPECT_FALSE(m.layers[0].bias.has_value());
}

TEST(Ridge, LargeLambdaShrinksWeights) {
  const Matrix x = test::random_matrix(50, 6, 2);
  const Matrix t = test::random_matrix(50, 3, 3);
  EXPECT_LT(ridge_fit(x, t, 1e6).layers[0].weight.norm(), 1e-3);
}

TEST(Ridge, SolvesNormalEquations) {
  const Matrix x = test::random_matrix(40, 5, 4);
  const Matrix t = test::random_matrix(40, 3, 5);
  const double lambda = 0.3;
  const Matrix w = ridge_fit(x, t, lambda).layers[0].weight;
  const Matrix lhs = w * ((x.transpose() * x) / 40.0 + lambda * Matrix::Identity(5, 5));
  const Matrix rhs = (t.transpose() * x) / 40.0;
  EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ridge, IsAStationaryPointAndMinimizer) {
  const Matrix x = test::random_matrix(30, 4, 6);
  const Matrix t = test::random_matrix(30, 2, 7);
  const double lambda = 0.05;
  const ProbeModel m = ridge_fit(x, t, lambda);
  Gradients g;
  const double f = loss_and_gradient(m, x, t, lambda, &g);
  EXPECT_LE(g.weight[0].cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(f, ridge_objective(m.layers[0].weight, x, t, lambda), 1e-12);
  // strictly convex: any perturbation increases the objective
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix w = m.layers[0].weight + 1e-3 * test::random_matrix(2, 4, 100 + s);
    EXPECT_GT(ridge_objective(w, x, t, lambda), f);
  }
}

TEST(Ridge, RejectsNonPositiveLambda) {
  EXPECT_THROW(ridge_fit(test::random_matrix(5, 2, 1), Matrix::Zero(5, 2), 0.0), ConfigError);
  EXPECT_THROW(ridge_fit(test::random_matrix(5, 2, 1), Matrix::Zero(5, 2), -1.0), ConfigError);
}

TEST(Ridge, GapInvarianceOnProp1Worlds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Prop1Params p;
    p.seed = seed;
    const Prop1World w = gen_prop1(p);
    const Vector prior = empirical_distribution(w.image.meta.single(), p.classes);
    const Matrix t = balanced_targets(w.image.meta.single(), prior);
    for (double lambda : {1e-3, 1e-1, 10.0}) {
      const ProbeModel m = ridge_fit(w.image.matrix, t, lambda);
      EXPECT_LE((m.layers[0].weight * w.gap).cwiseAbs().maxCoeff(), 1e-8) << "seed " << seed << " lambda " << lambda;
      const Prediction px = predict(m, w.image.matrix);
      const Prediction py = predict(m, w.text.matrix);
      EXPECT_EQ(px.classes, py.classes);
      const double lx = data_loss(Task::quadratic, forward(m, w.image.matrix), t);
      const double ly = data_loss(Task::quadratic, forward(m, w.text.matrix), t);
      EXPECT_LE(std::abs(lx - ly), 1e-8);
    }
  }
}

// ---- prediction ---------------------------------------------------------------

TEST(Predict, ZeroWeightsUniformAndTieToLowestIndex) {
  ProbeModel m = random_model(ProbeKind::linear, Task::multiclass, 4, 3, 1);
  m.layers[0].weight.setZero();
  m.layers[0].bias->setZero();
  const Prediction p = predict(m, test::random_matrix(5, 4, 2));
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(p.scores(i, j), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(p.classes[static_cast<std::size_t>(i)], 0);
  }
}

TEST(Predict, MultilabelLogitZeroIsPositive) {
  ProbeModel m = random_model(ProbeKind::linear, Task::multilabel, 2, 2, 1);
  m.layers[0].weight.setZero();
  m.layers[0].bias->setZero();
  const Prediction p = predict(m, test::random_matrix(3, 2, 2));
  EXPECT_DOUBLE_EQ(p.scores(0, 0), 0.5);
  EXPECT_EQ(p.positives, Eigen::MatrixXi::Ones(3, 2));
}

TEST(Predict, MatchesSeparatelyCodedSoftmaxAndSigmoid) {
  const Matrix x = test::random_matrix(12, 6, 3);
  const ProbeModel mc = random_model(ProbeKind::mlp, Task::multiclass, 6, 4, 4);
  const ProbeModel ml = random_model(ProbeKind::mlp, Task::multilabel, 6, 4, 5);
  auto logits = [&](const ProbeModel& m) {
    Matrix h = x;
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
      Matrix z(h.rows(), m.layers[k].weight.rows());
      for (Eigen::Index i = 0; i < h.rows(); ++i)
        for (Eigen::Index o = 0; o < z.cols(); ++o) {
          double s = (*m.layers[k].bias)(o);
          for (Eigen::Index j = 0; j < h.cols(); ++j) s += m.layers[k].weight(o, j) * h(i, j);
          z(i, o) = (k + 1 < m.layers.size() && s < 0) ? 0.0 : s;
        }
      h = z;
    }
    return h;
  };
  const Matrix zc = logits(mc), zl = logits(ml);
  const Prediction pc = predict(mc, x), pl = predict(ml, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double denom = 0;
    for (Eigen::Index j = 0; j < 4; ++j) denom += std::exp(zc(i, j));
    for (Eigen::Index j = 0; j < 4; ++j) {
      EXPECT_NEAR(pc.scores(i, j), std::exp(zc(i, j)) / denom, 1e-12);
      EXPECT_NEAR(pl.scores(i, j), 1.0 / (1.0 + std::exp(-zl(i, j))), 1e-12);
    }
  }
}

TEST(Predict, StableForExtremeLogits) {
  Matrix z(1, 3);
  z << 1000, -1000, 999;
  const Matrix p = softmax_rows(z);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-15);
  EXPECT_EQ(sigmoid(-1000), 0.0);
  EXPECT_EQ(sigmoid(1000), 1.0);
}

TEST(Predict, DimensionMismatch) {
  const ProbeModel m = random_model(ProbeKind::linear, Task::multiclass, 4, 2, 1);
  EXPECT_THROW(predict(m, test::random_matrix(2, 5, 1)), DataError);
}

TEST(Predict, GapClosingNeedsModality) {
  ProbeModel m = random_model(ProbeKind::linear, Task::multiclass, 3, 2, 1);
  m.gap_closing = GapClosing{};
  m.gap_closing->image = Vector::Zero(3);
  const Matrix x = test::random_matrix(2, 3, 1);
  EXPECT_THROW(predict(m, x), DataError);
  EXPECT_THROW(predict(m, x, Modality::text), DataError);
  EXPECT_NO_THROW(predict(m, x, Modality::image));
}

// ---- losses and gradients -----------------------------------------------------

TEST(Loss, CrossEntropyByHand) {
  Matrix z(1, 2);
  z << 0, std::log(3.0);  // p = (1/4, 3/4)
  EXPECT_NEAR(data_loss(Task::multiclass, z, one_hot({1}, 2)), -std::log(0.75), 1e-15);
}

TEST(Loss, BinaryCrossEntropyAveragedOverCells) {
  Matrix z(1, 2);
  z << 0, 0;
  Matrix t(1, 2);
  t << 1, 0;
  EXPECT_NEAR(data_loss(Task::multilabel, z, t), std::log(2.0), 1e-15);
}

TEST(Loss, QuadraticSumsOutputsAveragesRows) {
  Matrix z(2, 2);
  z << 1, 0, 0, 0;
  EXPECT_DOUBLE_EQ(data_loss(Task::quadratic, z, Matrix::Zero(2, 2)), 0.5);
}

class GradientCheck : public ::testing::TestWithParam<Task> {};

TEST_P(GradientCheck, MlpMatchesCentralDifferences) {
  const Task task = GetParam();
  const Eigen::Index c = 3;
  const Matrix x = test::random_matrix(9, 4, 21);
  Matrix t;
  if (task == Task::multiclass) t = one_hot({0, 1, 2, 0, 1, 2, 0, 1, 2}, c);
  if (task == Task::multilabel) t = multi_hot({{0}, {1, 2}, {}, {0, 2}, {1}, {2}, {0, 1}, {}, {1}}, c);
  const ProbeKind kind = task == Task::quadratic ? ProbeKind::linear : ProbeKind::mlp;
  if (task == Task::quadratic) t = test::random_matrix(9, c, 22);
  ProbeModel m = random_model(kind, task, 4, c, 23, {6, 5});
  const double l2 = task == Task::quadratic ? 0.01 : 0.0;
  Gradients g;
  loss_and_gradient(m, x, t, l2, &g);

  const double h = 1e-4;
  std::mt19937_64 rng(24);
  int checked = 0;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    for (int rep = 0; rep < 5; ++rep) {
      const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.layers[k].weight.size()));
      double& w = m.layers[k].weight.data()[idx];
      const double orig = w;
      w = orig + h;
      const double fp = loss_and_gradient(m, x, t, l2, nullptr);
      w = orig - h;
      const double fm = loss_and_gradient(m, x, t, l2, nullptr);
      w = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = g.weight[k].data()[idx];
      EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1.0, std::max(std::abs(fd), std::abs(an))))
          << "layer " << k << " index " << idx;
      ++checked;
      if (m.layers[k].bias) {
        const auto bi = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.layers[k].bias->size()));
        double& b = (*m.layers[k].bias)(bi);
        const double bo = b;
        b = bo + h;
        const double bp = loss_and_gradient(m, x, t, l2, nullptr);
        b = bo - h;
        const double bm = loss_and_gradient(m, x, t, l2, nullptr);
        b = bo;
        const double bfd = (bp - bm) / (2 * h);
        EXPECT_LE(std::abs(bfd - g.bias[k](bi)), 1e-4 * std::max(1.0, std::abs(bfd)));
      }
    }
  }
  EXPECT_GE(checked, 5);
}

INSTANTIATE_TEST_SUITE_P(AllTasks, GradientCheck, ::testing::Values(Task::multiclass, Task::multilabel, Task::quadratic));

// ---- training -----------------------------------------------------------------

TEST(Train, SeparableBlobsReachHighAccuracy) {
  const EmbeddingStore tr = blobs(400, 1), va = blobs(200, 2);
  for (ProbeKind kind : {ProbeKind::linear, ProbeKind::mlp}) {
    ProbeSpec spec;
    spec.kind = kind;
    spec.hidden = {16};
    TrainConfig cfg;
    cfg.batch_size = 32;
    const FitResult r = train_probe(spec, tr, va, cfg);
    const Prediction p = predict(r.model, tr.matrix);
    const EvalReport e = metrics(p, one_hot(tr.meta.single(), 2));
    EXPECT_GE(e.accuracy, 0.99) << to_string(kind);
  }
}

TEST(Train, ZeroEpochsRejected) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(Task::multiclass), ConfigError);
  cfg = TrainConfig{};
  cfg.learning_rate = 0;
  EXPECT_THROW(cfg.validate(Task::multiclass), ConfigError);
  cfg = TrainConfig{};
  cfg.ridge_lambda = 0;
  EXPECT_THROW(cfg.validate(Task::quadratic), ConfigError);
  EXPECT_NO_THROW(cfg.validate(Task::multiclass));
}

TEST(Train, SameSeedIsByteIdentical) {
  const EmbeddingStore tr = blobs(300, 3, 1.0), va = blobs(100, 4, 1.0);
  ProbeSpec spec;
  spec.kind = ProbeKind::mlp;
  spec.hidden = {8};
  TrainConfig cfg;
  cfg.seed = 11;
  cfg.batch_size = 50;
  const std::string a = to_json(train_probe(spec, tr, va, cfg).model).dump();
  const std::string b = to_json(train_probe(spec, tr, va, cfg).model).dump();
  EXPECT_EQ(a, b);
  cfg.seed = 12;
  EXPECT_NE(to_json(train_probe(spec, tr, va, cfg).model).dump(), a);
}

TEST(Train, ReturnsBestValidationSnapshot) {
  const EmbeddingStore tr = blobs(200, 5, 0.5), va = blobs(100, 6, 0.5);
  ProbeSpec spec;
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.05;
  const FitResult r = train_probe(spec, tr, va, cfg);
  ASSERT_EQ(r.val_losses.size(), 15u);
  const auto best = std::min_element(r.val_losses.begin(), r.val_losses.end());
  EXPECT_EQ(r.best_epoch, static_cast<int>(best - r.val_losses.begin()) + 1);
  const double vl = data_loss(Task::multiclass, forward(r.model, va.matrix), one_hot(va.meta.single(), 2));
  EXPECT_DOUBLE_EQ(vl, *best);
}

TEST(Train, NonFiniteLossReportsEpochAndBatch) {
  EmbeddingStore tr = blobs(10, 7);
  tr.matrix.setConstant(1e308);
  ProbeSpec spec;
  TrainConfig cfg;
  try {
    train_probe(spec, tr, tr, cfg);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, CloseGapRecordsTrainingModalityMean) {
  EmbeddingStore tr = blobs(100, 8);
  tr.modality = Modality::text;
  ProbeSpec spec;
  spec.close_gap = true;
  TrainConfig cfg;
  cfg.epochs = 2;
  const FitResult r = train_probe(spec, tr, tr, cfg);
  ASSERT_TRUE(r.model.gap_closing.has_value());
  EXPECT_FALSE(r.model.gap_closing->image.has_value());
  ASSERT_TRUE(r.model.gap_closing->text.has_value());
  EXPECT_LE((*r.model.gap_closing->text - column_mean(tr.matrix)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Train, MultilabelNeedsIndexSets) {
  const EmbeddingStore tr = blobs(20, 9);
  ProbeSpec spec;
  spec.task = Task::multilabel;
  EXPECT_THROW(train_probe(spec, tr, tr, TrainConfig{}), DataError);
}

TEST(GapClosing, ConstantGapPairsAreFullyConsistent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Prop1Params p;
    p.seed = seed;
    const Prop1World w = gen_prop1(p);
    ProbeSpec spec;
    spec.kind = seed % 2 ? ProbeKind::mlp : ProbeKind::linear;
    spec.hidden = {16};
    spec.close_gap = true;
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = seed;
    ProbeModel m = train_probe(spec, w.image, w.image, cfg).model;
    m.gap_closing->text = column_mean(w.text.matrix);
    const Matrix xi = preprocess(m, w.image.matrix, Modality::image);
    const Matrix xt = preprocess(m, w.text.matrix, Modality::text);
    EXPECT_LE((xi - xt).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(consistency(predict(m, w.image), predict(m, w.text)), 1.0);
  }
}

// ---- metrics ------------------------------------------------------------------

TEST(Metrics, MulticlassMatchesBruteForce) {
  std::mt19937_64 rng(31);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 1 + static_cast<int>(rng() % 50), c = 2 + static_cast<int>(rng() % 5);
    std::vector<int> truth, hard;
    Matrix scores = Matrix::Zero(n, c);
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(c)));
      hard.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(c)));
      scores(i, hard.back()) = 1.0;
    }
    Prediction p;
    p.task = Task::multiclass;
    p.scores = scores;
    p.classes = hard;
    const EvalReport r = metrics(p, one_hot(truth, c));
    const BruteF1 b = brute_f1_multiclass(truth, hard, c);
    EXPECT_NEAR(r.micro_f1, b.micro, 1e-12);
    EXPECT_NEAR(r.macro_f1, b.macro, 1e-12);
    long support = 0;
    for (const auto& pc : r.per_class) support += pc.support;
    EXPECT_EQ(support, n);
  }
}

TEST(Metrics, MultilabelMatchesBruteForce) {
  std::mt19937_64 rng(32);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 1 + static_cast<int>(rng() % 50), c = 1 + static_cast<int>(rng() % 6);
    Matrix truth(n, c);
    Eigen::MatrixXi hard(n, c);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        truth(i, j) = rng() % 3 == 0 ? 1.0 : 0.0;
        hard(i, j) = rng() % 3 == 0 ? 1 : 0;
      }
    Prediction p;
    p.task = Task::multilabel;
    p.scores = hard.cast<double>() * 0.8 + Matrix::Constant(n, c, 0.1);
    p.positives = hard;
    const EvalReport r = metrics(p, truth);
    const BruteF1 b = brute_f1_multilabel(truth, hard);
    EXPECT_NEAR(r.micro_f1, b.micro, 1e-12);
    EXPECT_NEAR(r.macro_f1, b.macro, 1e-12);
  }
}

TEST(Metrics, RandomTwentyByFive) {
  std::mt19937_64 rng(33);
  Matrix truth(20, 5);
  Eigen::MatrixXi hard(20, 5);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 5; ++j) {
      truth(i, j) = static_cast<double>(rng() % 2);
      hard(i, j) = static_cast<int>(rng() % 2);
    }
  Prediction p;
  p.task = Task::multilabel;
  p.scores = hard.cast<double>();
  p.positives = hard;
  const EvalReport r = metrics(p, truth);
  const BruteF1 b = brute_f1_multilabel(truth, hard);
  EXPECT_NEAR(r.micro_f1, b.micro, 1e-12);
  EXPECT_NEAR(r.macro_f1, b.macro, 1e-12);
}

TEST(Metrics, PerfectPredictions) {
  Prediction p;
  p.task = Task::multiclass;
  p.scores = one_hot({0, 1, 2, 1}, 3);
  p.classes = {0, 1, 2, 1};
  const EvalReport r = metrics(p, one_hot({0, 1, 2, 1}, 3));
  EXPECT_EQ(r.micro_f1, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Metrics, AllNegativeMultilabelHasZeroMicroF1) {
  Prediction p;
  p.task = Task::multilabel;
  p.scores = Matrix::Constant(3, 2, 0.1);
  p.positives = Eigen::MatrixXi::Zero(3, 2);
  Matrix t(3, 2);
  t << 1, 0, 0, 1, 1, 1;
  const EvalReport r = metrics(p, t);
  EXPECT_EQ(r.micro_f1, 0.0);
  EXPECT_EQ(r.macro_f1, 0.0);
  EXPECT_NEAR(r.accuracy, 2.0 / 6.0, 1e-15);  // cell-wise
}

TEST(Metrics, LossMatchesTrainingLoss) {
  const Matrix x = test::random_matrix(15, 4, 34);
  const ProbeModel mc = random_model(ProbeKind::mlp, Task::multiclass, 4, 3, 35);
  const Matrix tc = one_hot({0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, 3);
  EXPECT_NEAR(metrics(predict(mc, x), tc).loss, data_loss(Task::multiclass, forward(mc, x), tc), 1e-12);
  const ProbeModel ml = random_model(ProbeKind::linear, Task::multilabel, 4, 3, 36);
  Matrix tl = Matrix::Zero(15, 3);
  tl(0, 1) = tl(3, 2) = tl(7, 0) = 1.0;
  EXPECT_NEAR(metrics(predict(ml, x), tl).loss, data_loss(Task::multilabel, forward(ml, x), tl), 1e-12);
  const ProbeModel mq = random_model(ProbeKind::linear, Task::quadratic, 4, 3, 37);
  const Matrix tq = balanced_targets({0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, Vector::Constant(3, 1.0 / 3));
  EXPECT_NEAR(metrics(predict(mq, x), tq).loss, data_loss(Task::quadratic, forward(mq, x), tq), 1e-12);
}

TEST(Consistency, IdenticalAndComplementary) {
  EXPECT_EQ(consistency(std::vector<int>{0, 1, 2}, std::vector<int>{0, 1, 2}), 1.0);
  Eigen::MatrixXi a(2, 2), b(2, 2);
  a << 1, 0, 0, 1;
  b << 0, 1, 1, 0;
  EXPECT_EQ(consistency(a, b), 0.0);
  EXPECT_EQ(consistency(a, a), 1.0);
  EXPECT_THROW(consistency(std::vector<int>{0}, std::vector<int>{0, 1}), DataError);
}

TEST(Consistency, MatchesBruteForce) {
  std::mt19937_64 rng(38);
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 1 + static_cast<int>(rng() % 40);
    std::vector<int> a, b;
    int same = 0;
    for (int i = 0; i < n; ++i) {
      a.push_back(static_cast<int>(rng() % 3));
      b.push_back(static_cast<int>(rng() % 3));
      same += a.back() == b.back();
    }
    EXPECT_NEAR(consistency(a, b), static_cast<double>(same) / n, 1e-12);
  }
}

TEST(Consistency, SparseRandomMultilabelAgreesOnNegatives) {
  // Two unrelated predictors that rarely fire still agree on most cells.
  std::mt19937_64 rng(39);
  Eigen::MatrixXi a(500, 20), b(500, 20);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng() % 20 == 0;
    b.data()[i] = rng() % 20 == 0;
  }
  EXPECT_GT(consistency(a, b), 0.85);
}

// ---- model file ---------------------------------------------------------------

TEST(ModelFile, JsonRoundTrip) {
  ProbeModel m = random_model(ProbeKind::mlp, Task::multilabel, 5, 3, 41, {4, 6});
  m.gap_closing = GapClosing{};
  m.gap_closing->image = test::random_matrix(1, 5, 42).row(0).transpose();
  m.config.seed = 9;
  const nlohmann::json j = to_json(m);
  const ProbeModel back = model_from_json(j);
  EXPECT_EQ(to_json(back).dump(), j.dump());
  EXPECT_EQ(back.layers[1].weight, m.layers[1].weight);
  EXPECT_FALSE(back.gap_closing->text.has_value());
}

TEST(ModelFile, ValidationErrors) {
  nlohmann::json j = to_json(random_model(ProbeKind::mlp, Task::multiclass, 3, 2, 1, {4}));
  j["layers"][1]["cols"] = 5;
  j["layers"][1]["weights"] = std::vector<double>(10, 0.0);
  EXPECT_THROW(model_from_json(j), DataError);

  nlohmann::json q = to_json(random_model(ProbeKind::linear, Task::multiclass, 3, 2, 1));
  q["task"] = "quadratic";  // carries a bias
  EXPECT_THROW(model_from_json(q), DataError);
  EXPECT_THROW(model_from_json(nlohmann::json::object()), DataError);
}

TEST(InitModel, QuadraticRequiresLinear) {
  ProbeSpec spec;
  spec.kind = ProbeKind::mlp;
  spec.task = Task::quadratic;
  EXPECT_THROW(init_model(spec, 3, 2, 0), DataError);
}
