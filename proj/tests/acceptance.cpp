// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "xdiag/rectify.hpp"
#include "xdiag/ridge.hpp"
#include "xdiag/synthlab.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace xdiag;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::vector<std::string> failed;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failed.push_back(what);
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Template> parse_all(const std::vector<std::string>& src) {
  std::vector<Template> out;
  for (const auto& s : src) out.push_back(parse_template(s));
  return out;
}

std::vector<EnsembleTemplate> shipped_ensemble() {
  return load_ensemble(std::filesystem::path(XDIAG_DATA_DIR) / "openai_imagenet_templates.json");
}

// ---- A1 ---------------------------------------------------------------------

Outcome a1() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst_wg = 0, worst_loss = 0;
  std::size_t disagreements = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Prop1Params p;
    p.seed = seed;
    p.d = 32;
    p.n = 500;
    p.classes = 4;
    const Prop1World w = gen_prop1(p);
    const Matrix t = balanced_targets(w.image.meta.single(), empirical_distribution(w.image.meta.single(), p.classes));
    for (double lambda : {1e-3, 1e-1, 10.0}) {
      const ProbeModel m = ridge_fit(w.image.matrix, t, lambda);
      worst_wg = std::max(worst_wg, (m.layers[0].weight * w.gap).cwiseAbs().maxCoeff());
      const Prediction px = predict(m, w.image.matrix), py = predict(m, w.text.matrix);
      for (std::size_t i = 0; i < px.classes.size(); ++i) disagreements += px.classes[i] != py.classes[i];
      const double lx = data_loss(Task::quadratic, forward(m, w.image.matrix), t);
      const double ly = data_loss(Task::quadratic, forward(m, w.text.matrix), t);
      worst_loss = std::max(worst_loss, std::abs(lx - ly));
    }
  }
  const double secs = seconds_since(t0);
  o.check(worst_wg <= 1e-8, "|Wg|_inf <= 1e-8");
  o.check(disagreements == 0, "identical predictions");
  o.check(worst_loss <= 1e-8, "|dloss| <= 1e-8");
  o.check(secs < 5.0, "runtime < 5 s");
  o.detail << "max|Wg|=" << worst_wg << " disagreements=" << disagreements << " max|dloss|=" << worst_loss
           << " time=" << secs << "s";
  return o;
}

// ---- A2 ---------------------------------------------------------------------

Outcome a2() {
  Outcome o;
  double mag_std = 0, dir_min = 1, orth = 0, center = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Prop1Params p;
    p.seed = seed;
    const Prop1World w = gen_prop1(p);
    const GapReport r = gap_report(w.image, w.text);
    std::vector<const LevelStats*> levels{&r.individual};
    if (r.class_level) levels.push_back(&*r.class_level);
    for (const LevelStats* l : levels) {
      if (!l->direction || !l->orthogonality_image || !l->orthogonality_text || !l->center_image || !l->center_text) {
        o.check(false, "statistics defined");
        continue;
      }
      mag_std = std::max(mag_std, l->magnitude.std);
      dir_min = std::min(dir_min, l->direction->mean);
      for (const auto& s : {*l->orthogonality_image, *l->orthogonality_text})
        orth = std::max({orth, std::abs(s.mean), s.std});
      for (const auto& s : {*l->center_image, *l->center_text}) center = std::max({center, std::abs(s.mean), s.std});
    }
  }
  o.check(mag_std <= 1e-10, "magnitude std <= 1e-10");
  o.check(dir_min >= 1 - 1e-10, "direction mean >= 1 - 1e-10");
  o.check(orth <= 1e-8, "orthogonality <= 1e-8");
  o.check(center <= 1e-8, "center <= 1e-8");
  o.detail << "max magnitude std=" << mag_std << " min direction=" << dir_min << " max orthogonality=" << orth
           << " max center=" << center;
  return o;
}

// ---- A3 ---------------------------------------------------------------------

Outcome a3() {
  Outcome o;
  double max_coord = 0, min_cons = 1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Prop1Params p;
    p.seed = seed;
    const Prop1World w = gen_prop1(p);
    const Matrix xi = close_gap(w.image).store.matrix, xt = close_gap(w.text).store.matrix;
    max_coord = std::max(max_coord, (xi - xt).cwiseAbs().maxCoeff());
    ProbeSpec spec;
    spec.kind = seed % 2 ? ProbeKind::mlp : ProbeKind::linear;
    spec.hidden = {32};
    spec.close_gap = true;
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = seed;
    ProbeModel m = train_probe(spec, w.image, w.image, cfg).model;
    m.gap_closing->text = column_mean(w.text.matrix);
    min_cons = std::min(min_cons, consistency(predict(m, w.image), predict(m, w.text)));
  }

  // Planted pairs: each validation image with the prompt naming its own (class, background).
  double with_sum = 0, without_sum = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PlantedParams p;
    p.seed = seed;
    const PlantedWorld w = gen_planted(p);
    const Template tpl = parse_template(w.templates[0]);
    EmbeddingStore text = w.val;
    text.modality = Modality::text;
    for (Eigen::Index i = 0; i < w.val.rows(); ++i) {
      Assignment a{{kPlantedClassFamily, w.val.meta.attributes.at(kPlantedClassFamily)[static_cast<std::size_t>(i)]},
                   {kPlantedNuisanceFamily, w.val.meta.attributes.at(kPlantedNuisanceFamily)[static_cast<std::size_t>(i)]}};
      text.matrix.row(i) = w.text.embed({render(tpl, a), a, 0, -1}).transpose();
    }
    TrainConfig cfg;
    cfg.seed = seed;
    ProbeSpec plain, closing;
    closing.close_gap = true;
    const ProbeModel m0 = train_probe(plain, w.train, w.val, cfg).model;
    ProbeModel m1 = train_probe(closing, w.train, w.val, cfg).model;
    // each modality centred by its own mean over the paired evaluation set
    m1.gap_closing->image = column_mean(w.val.matrix);
    m1.gap_closing->text = column_mean(text.matrix);
    without_sum += consistency(predict(m0, w.val), predict(m0, text));
    with_sum += consistency(predict(m1, w.val), predict(m1, text));
  }
  o.check(max_coord <= 1e-10, "closed inputs coincide within 1e-10");
  o.check(min_cons == 1.0, "consistency = 1 on constant-gap pairs");
  o.check(with_sum >= without_sum, "planted consistency with closing >= without");
  o.detail << "max coord diff=" << max_coord << " min consistency=" << min_cons << " planted consistency closing="
           << with_sum / 20 << " vs plain=" << without_sum / 20;
  return o;
}

// ---- A4 ---------------------------------------------------------------------

Outcome a4() {
  Outcome o;
  double spec = 0, cm = 0, scale_loss = 0, min_gap_move = 1e300;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    spec = std::max(spec, spectral_identity_check(2 + static_cast<int>(seed % 15), 1 + static_cast<int>(seed % 7), seed).residual);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ClassMeanParams p;
    p.seed = seed;
    p.classes = 2 + static_cast<int>(seed % 3);
    cm = std::max(cm, classmean_check(p).residual);
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ScalingCheck s = scaling_check(8, 6, 2.0, seed);
    scale_loss = std::max(scale_loss, s.loss_change);
    min_gap_move = std::min(min_gap_move, std::abs(s.gap_after - s.gap_before));
  }
  o.check(spec <= 1e-9, "spectral residual <= 1e-9");
  o.check(cm <= 1e-8, "class-mean residual <= 1e-8");
  o.check(scale_loss <= 1e-10, "scaling loss change <= 1e-10");
  o.check(min_gap_move > 1e-6, "scaling moves the gap");
  o.detail << "max spectral residual=" << spec << " max classmean residual=" << cm << " max scaling dloss=" << scale_loss
           << " min gap change=" << min_gap_move;
  return o;
}

// ---- A5 ---------------------------------------------------------------------

// Class family plus three players: "shade" and "tone" carry identical tokens,
// "frame" carries zero vectors and so cannot move p_c.
struct ShapleyWorld {
  AttributeSchema schema = make_schema({{"kind", {"k0", "k1"}},
                                        {"shade", {"s0", "s1", "s2"}},
                                        {"tone", {"s0", "s1", "s2"}},
                                        {"frame", {"f0", "f1"}}},
                                       "kind", {"k0", "k1"});
  std::vector<Template> templates{parse_template("{kind}[ shade {shade}][ tone {tone}][ frame {frame}]")};
  TokenWorld text;
  ProbeModel model;

  explicit ShapleyWorld(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int d = 6;
    auto draw = [&] { return detail::gaussian(d, 1, rng).col(0).eval(); };
    text.offset = draw();
    for (const auto& v : {"k0", "k1"}) text.tokens["kind"][v] = draw();
    for (const auto& v : {"s0", "s1", "s2"}) text.tokens["shade"][v] = text.tokens["tone"][v] = draw();
    for (const auto& v : {"f0", "f1"}) text.tokens["frame"][v] = Vector::Zero(d);
    ProbeSpec spec;
    model = init_model(spec, d, 2, seed);
  }

  AttributionContext ctx() const {
    return {&model, &schema, templates, {}, {}, text.embedder()};
  }
};

Outcome a5() {
  Outcome o;
  double eff = 0, dummy = 0, sym = 0;
  int inside = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ShapleyWorld w(seed);
    const auto ctx = w.ctx();
    // players marginalized when present: shade and tone are interchangeable
    const Game g = prompt_game(ctx, 1, {{"shade", std::nullopt}, {"tone", std::nullopt}, {"frame", std::nullopt}});
    double total = 0;
    std::vector<double> phi;
    for (std::size_t k = 0; k < 3; ++k) phi.push_back(shapley_exact(g, k));
    for (double v : phi) total += v;
    eff = std::max(eff, std::abs(total - (g.value(7) - g.value(0))));
    dummy = std::max(dummy, std::abs(phi[2]));
    sym = std::max(sym, std::abs(phi[0] - phi[1]));
    // token players: the same token in both symmetric families
    const Game gt = prompt_game(ctx, 0, {{"shade", "s1"}, {"tone", "s1"}, {"frame", "f0"}});
    const double t0 = shapley_exact(gt, 0), t1 = shapley_exact(gt, 1), t2 = shapley_exact(gt, 2);
    eff = std::max(eff, std::abs(t0 + t1 + t2 - (gt.value(7) - gt.value(0))));
    dummy = std::max(dummy, std::abs(t2));
    sym = std::max(sym, std::abs(t0 - t1));
    // Monte Carlo against exact for the analyzed token
    const double exact = shapley_influence_exact(ctx, 0, "shade", "s2");
    const McEstimate mc = shapley_influence_mc(ctx, 0, "shade", "s2", 10000, seed);
    inside += std::abs(mc.value - exact) <= 3 * mc.stderr_ + 1e-15;
  }
  o.check(eff <= 1e-10, "efficiency within 1e-10");
  o.check(dummy <= 1e-8, "dummy within 1e-8");
  o.check(sym <= 1e-10, "symmetry within 1e-10");
  o.check(inside >= 19, "Monte Carlo within 3 stderr in >= 19/20 seeds");
  o.detail << "max efficiency err=" << eff << " max dummy=" << dummy << " max symmetry err=" << sym
           << " MC within 3se=" << inside << "/20";
  return o;
}

// ---- A6 ---------------------------------------------------------------------

Outcome a6() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto ensemble = shipped_ensemble();
  int worst_ok = 0;
  double spearman_sum = 0, minority_delta = 0, global_delta = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    PlantedParams p;
    p.seed = seed;
    p.correlation = 0.95;
    const PlantedWorld w = gen_planted(p);
    TrainConfig cfg;
    cfg.seed = seed;
    const ProbeModel model = train_probe(ProbeSpec{}, w.train, w.val, cfg).model;
    const auto templates = parse_all(w.templates);
    SliceEvalOptions so;
    so.ensemble = ensemble;
    const SliceReport rep = slice_eval(model, w.text_embed(), w.schema, templates, enumerate_slices(w.schema), &w.val, so);

    std::set<std::string> minority;
    std::vector<Slice> minority_slices;
    for (const auto& [c, b] : w.minority_combos()) {
      minority_slices.push_back(make_slice(w.schema, w.combo_assignment(c, b)));
      minority.insert(minority_slices.back().name);
    }
    const auto ranked = discover(rep, {});
    worst_ok += ranked.size() >= 2 && minority.count(ranked[0].row.slice.name) && minority.count(ranked[1].row.slice.name);
    spearman_sum += correlate(rep).spearman.value_or(0.0);

    RectifyOptions ro;
    ro.ensemble = ensemble;
    ro.train.epochs = 10;
    ro.train.learning_rate = 1e-3;
    ro.train.seed = seed;
    const auto rr = rectify(model, minority_slices, w.schema, templates, w.text_embed(), ro);
    const RectifyReport cmp = compare(model, rr.model, w.val, w.schema, minority_slices);
    double d = 0;
    for (const auto& row : cmp.rows) d += row.delta.value_or(0.0);
    minority_delta += d / static_cast<double>(cmp.rows.size());
    global_delta += cmp.global_delta;
  }
  const double secs = seconds_since(t0);
  const double sp = spearman_sum / 20, md = minority_delta / 20, gd = global_delta / 20;
  o.check(worst_ok >= 18, "minority slices rank worst in >= 18/20 seeds");
  o.check(sp >= 0.6, "mean Spearman >= 0.6");
  o.check(md > 0.0, "mean minority delta > 0");
  o.check(gd > -0.05, "mean global delta > -0.05");
  o.check(secs < 60.0, "runtime < 60 s");
  o.detail << "minority worst=" << worst_ok << "/20 mean spearman=" << sp << " mean minority delta=" << md
           << " mean global delta=" << gd << " time=" << secs << "s";
  return o;
}

// ---- A7 ---------------------------------------------------------------------

long double brute_mean(const std::vector<double>& v) {
  long double s = 0;
  for (double x : v) s += x;
  return s / static_cast<long double>(v.size());
}

std::optional<double> brute_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const long double ma = brute_mean(a), mb = brute_mean(b);
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : v) {
      less += x < v[i];
      equal += x == v[i];
    }
    r[i] = less + (equal + 1) / 2;
  }
  return r;
}

double f1(double tp, double fp, double fn) {
  const double p = tp + fp == 0 ? 0 : tp / (tp + fp), r = tp + fn == 0 ? 0 : tp / (tp + fn);
  return p + r == 0 ? 0 : 2 * p * r / (p + r);
}

Outcome a7() {
  Outcome o;
  std::mt19937_64 rng(2024);
  double f1_err = 0, cons_err = 0, corr_err = 0, grad_err = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const int n = 2 + static_cast<int>(rng() % 49), c = 2 + static_cast<int>(rng() % 5);
    // multiclass and multilabel predictions with brute-force confusion counts
    std::vector<int> truth(static_cast<std::size_t>(n)), hard(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng() % static_cast<std::uint64_t>(c));
      hard[static_cast<std::size_t>(i)] = static_cast<int>(rng() % static_cast<std::uint64_t>(c));
    }
    Prediction pm;
    pm.task = Task::multiclass;
    pm.scores = one_hot(hard, c);
    pm.classes = hard;
    const EvalReport rm = metrics(pm, one_hot(truth, c));
    double macro = 0, tps = 0, fps = 0, fns = 0;
    for (int k = 0; k < c; ++k) {
      double tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        tp += truth[static_cast<std::size_t>(i)] == k && hard[static_cast<std::size_t>(i)] == k;
        fp += truth[static_cast<std::size_t>(i)] != k && hard[static_cast<std::size_t>(i)] == k;
        fn += truth[static_cast<std::size_t>(i)] == k && hard[static_cast<std::size_t>(i)] != k;
      }
      macro += f1(tp, fp, fn);
      tps += tp;
      fps += fp;
      fns += fn;
    }
    f1_err = std::max({f1_err, std::abs(rm.macro_f1 - macro / c), std::abs(rm.micro_f1 - f1(tps, fps, fns))});

    Matrix tl(n, c);
    Eigen::MatrixXi hl(n, c);
    for (Eigen::Index i = 0; i < tl.size(); ++i) {
      tl.data()[i] = static_cast<double>(rng() % 3 == 0);
      hl.data()[i] = static_cast<int>(rng() % 3 == 0);
    }
    Prediction pl;
    pl.task = Task::multilabel;
    pl.scores = hl.cast<double>();
    pl.positives = hl;
    const EvalReport rl = metrics(pl, tl);
    macro = tps = fps = fns = 0;
    for (int k = 0; k < c; ++k) {
      double tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < n; ++i) {
        const bool t = tl(i, k) > 0.5, h = hl(i, k) == 1;
        tp += t && h;
        fp += !t && h;
        fn += t && !h;
      }
      macro += f1(tp, fp, fn);
      tps += tp;
      fps += fp;
      fns += fn;
    }
    f1_err = std::max({f1_err, std::abs(rl.macro_f1 - macro / c), std::abs(rl.micro_f1 - f1(tps, fps, fns))});

    double same = 0;
    for (int i = 0; i < n; ++i) same += truth[static_cast<std::size_t>(i)] == hard[static_cast<std::size_t>(i)];
    cons_err = std::max(cons_err, std::abs(consistency(truth, hard) - same / n));

    std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    std::normal_distribution<double> nd;
    for (int i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = inst % 2 ? std::round(nd(rng) * 2) : nd(rng);  // odd instances carry ties
      b[static_cast<std::size_t>(i)] = nd(rng) + 0.5 * a[static_cast<std::size_t>(i)];
    }
    const auto p = pearson(a, b), bp = brute_pearson(a, b);
    const auto s = spearman(a, b), bs = brute_pearson(brute_ranks(a), brute_ranks(b));
    o.check(p.has_value() == bp.has_value() && s.has_value() == bs.has_value(), "correlation definedness");
    if (p && bp) corr_err = std::max(corr_err, std::abs(*p - *bp));
    if (s && bs) corr_err = std::max(corr_err, std::abs(*s - *bs));
  }

  // MLP gradients against central differences, every task
  for (Task task : {Task::multiclass, Task::multilabel}) {
    ProbeSpec spec;
    spec.kind = ProbeKind::mlp;
    spec.task = task;
    spec.hidden = {7, 5};
    ProbeModel m = init_model(spec, 4, 3, 77);
    std::mt19937_64 g(78);
    const Matrix x = detail::gaussian(11, 4, g);
    std::vector<int> lab;
    std::vector<std::vector<int>> sets;
    for (int i = 0; i < 11; ++i) {
      lab.push_back(i % 3);
      sets.push_back(i % 2 ? std::vector<int>{i % 3} : std::vector<int>{0, 2});
    }
    const Matrix t = task == Task::multiclass ? one_hot(lab, 3) : multi_hot(sets, 3);
    Gradients grad;
    loss_and_gradient(m, x, t, 0.0, &grad);
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
      for (Eigen::Index idx = 0; idx < m.layers[k].weight.size(); ++idx) {
        double& w = m.layers[k].weight.data()[idx];
        const double orig = w, h = 1e-4;
        w = orig + h;
        const double fp = loss_and_gradient(m, x, t, 0.0, nullptr);
        w = orig - h;
        const double fm = loss_and_gradient(m, x, t, 0.0, nullptr);
        w = orig;
        const double fd = (fp - fm) / (2 * h), an = grad.weight[k].data()[idx];
        grad_err = std::max(grad_err, std::abs(fd - an) / std::max(1.0, std::max(std::abs(fd), std::abs(an))));
      }
    }
  }
  o.check(f1_err <= 1e-12, "F1 matches brute force");
  o.check(cons_err <= 1e-12, "consistency matches brute force");
  o.check(corr_err <= 1e-12, "Pearson/Spearman match brute force");
  o.check(grad_err <= 1e-4, "MLP gradients within relative 1e-4");
  o.detail << "max F1 err=" << f1_err << " max consistency err=" << cons_err << " max correlation err=" << corr_err
           << " max gradient rel err=" << grad_err;
  return o;
}

// ---- A8 ---------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(XDIAG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome a8() {
  Outcome o;
  const auto root = std::filesystem::temp_directory_path() / ("xdiag_acceptance_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  const std::string ens = std::string(XDIAG_DATA_DIR) + "/openai_imagenet_templates.json";

  for (const char* run : {"a", "b"}) {
    const auto d = root / run;
    std::filesystem::create_directories(d);
    const std::string D = d.string();
    const std::string scn = D + "/scn";
    const std::vector<std::string> cmds{
        "synth prop1 --seed 4 --out " + D + "/p1",
        "synth planted --seed 4 --ensemble " + ens + " --ensemble-cap 8 --out " + scn,
        "synth spectral --seeds 10 --out " + D + "/sp",
        "synth classmean --seeds 10 --out " + D + "/cm",
        "info " + scn + "/train.emb --out " + D + "/info.json",
        "geometry --image " + D + "/p1/img.emb --text " + D + "/p1/txt.emb --out " + D + "/geo.json",
        "train --train " + scn + "/train.emb --val " + scn + "/val.emb --seed 2 --out " + D + "/model.json",
        "train --train " + scn + "/train.emb --val " + scn + "/val.emb --model mlp --hidden 16 --epochs 3 --seed 2 --out " +
            D + "/mlp.json",
        "train --train " + scn + "/train.emb --loss quad --close-gap --out " + D + "/quad.json",
        "eval --model " + D + "/model.json --store " + scn + "/val.emb --out " + D + "/eval.json",
        "--threads 2 slices --model " + D + "/model.json --schema " + scn + "/schema.json --templates " + scn +
            "/templates.json --ensemble " + ens + " --ensemble-cap 8 --text-store " + scn + "/text.emb --images " + scn +
            "/val.emb --out " + D + "/slices.json",
        "attrs --model " + D + "/model.json --schema " + scn + "/schema.json --templates " + scn +
            "/templates.json --synth-scenario " + scn + " --class c0 --mc 200 --seed 5 --out " + D + "/attrs.json",
        "rectify --model " + D + "/model.json --slices " + D + "/slices.json --schema " + scn + "/schema.json --templates " +
            scn + "/templates.json --ensemble " + ens + " --ensemble-cap 8 --text-store " + scn + "/text.emb --top 2 --eval " +
            scn + "/val.emb --report " + D + "/rect_report.json --out " + D + "/rect.json",
        "correlate --text-report " + D + "/slices.json --image-report " + D + "/slices.json --out " + D + "/corr.csv",
        "prompts --schema " + scn + "/schema.json --templates " + scn + "/templates.json --ensemble " + ens +
            " --ensemble-cap 8 --out " + D + "/manifest.txt",
    };
    for (const auto& c : cmds) {
      const int code = run_cli(c);
      if (code != 0) o.check(false, "exit 0 for: " + c.substr(0, c.find(' ', c.find(' ') + 1)));
    }
  }
  std::size_t files = 0, differing = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = root / "b" / std::filesystem::relative(e.path(), root / "a");
    // reports echo their own paths in the config block; compare with the run directory masked
    std::string sa = slurp(e.path()), sb = slurp(other);
    for (auto* s : {&sa, &sb}) {
      for (const std::string from : {(root / "a").string(), (root / "b").string()}) {
        for (auto pos = s->find(from); pos != std::string::npos; pos = s->find(from, pos)) s->replace(pos, from.size(), "RUN");
      }
    }
    if (sa != sb) {
      ++differing;
      o.check(false, "identical " + std::filesystem::relative(e.path(), root / "a").string());
    }
  }
  o.check(files >= 20, "outputs produced");

  // EMB1 round trip
  std::mt19937_64 rng(11);
  EmbeddingStore s;
  s.modality = Modality::image;
  s.matrix = detail::gaussian(100, 512, rng).cast<float>().cast<double>();
  const auto p1 = root / "rt1.emb", p2 = root / "rt2.emb";
  write_store(s, p1);
  const EmbeddingStore back = read_store(p1);
  write_store(back, p2);
  const bool exact = back.matrix == s.matrix && slurp(p1) == slurp(p2);
  o.check(exact, "EMB1 round trip bit-exact");
  std::filesystem::remove_all(root);
  o.detail << "compared " << files << " files, " << differing << " differ; EMB1 round trip "
           << (exact ? "bit-exact" : "NOT exact");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5}, {"A6", a6}, {"A7", a7}, {"A8", a8}};
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << o.detail.str();
    for (const auto& f : o.failed) std::cout << " [failed: " << f << "]";
    std::cout << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
