#pragma once

// Command-line front end. run() returns the process exit code:
// 0 success, 1 usage error, 2 data or validation error.

#include "xdiag/diagnose.hpp"
#include "xdiag/geometry.hpp"
#include "xdiag/io.hpp"
#include "xdiag/metrics.hpp"
#include "xdiag/rectify.hpp"
#include "xdiag/ridge.hpp"
#include "xdiag/store.hpp"
#include "xdiag/synthlab.hpp"
#include "xdiag/text.hpp"
#include "xdiag/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace xdiag::cli {

inline constexpr int kSchemaVersion = 1;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline void need_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw DataError("no such file: " + path);
}

inline void need_dir(const std::string& path) {
  if (!fs::is_directory(path)) throw DataError("no such directory: " + path);
}

inline void need_out_parent(const std::string& path) {
  const fs::path p(path);
  const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw DataError("output directory does not exist: " + parent.string());
}

/// Runs `fn`, prefixing data errors with the file they came from.
template <typename Fn>
auto from_file(const std::string& path, Fn&& fn) -> decltype(fn()) {
  need_file(path);
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  } catch (const DataError& e) {
    const std::string msg = e.what();
    if (msg.find(path) != std::string::npos) throw;
    throw DataError(path + ": " + msg);
  }
}

inline EmbeddingStore load_store(const std::string& path) {
  return from_file(path, [&] { return read_store(path); });
}
inline ProbeModel load_model_file(const std::string& path) {
  return from_file(path, [&] { return load_model(path); });
}
inline AttributeSchema load_schema_file(const std::string& path) {
  return from_file(path, [&] { return load_schema(path); });
}
inline std::vector<Template> load_templates_file(const std::string& path) {
  return from_file(path, [&] { return load_templates(path); });
}
inline std::vector<EnsembleTemplate> load_ensemble_file(const std::string& path) {
  if (path.empty()) return {};
  return from_file(path, [&] { return load_ensemble(path); });
}
inline json load_json_file(const std::string& path) {
  return from_file(path, [&] { return parse_json_file(path); });
}

inline bool is_csv(const std::string& path) {
  return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
}

inline json envelope(const std::string& command, json config, json seed, json report) {
  return {{"schema_version", kSchemaVersion},
          {"command", command},
          {"config", std::move(config)},
          {"seed", std::move(seed)},
          {"report", std::move(report)}};
}

inline void write_json(const std::string& path, const json& j) {
  need_out_parent(path);
  write_file_atomic(path, j.dump(2) + "\n");
}

inline void write_text(const std::string& path, const std::string& s) {
  need_out_parent(path);
  write_file_atomic(path, s);
}

/// JSON to `path`, or to `out` when no path is given.
inline void emit(const std::string& path, const json& j, std::ostream& out) {
  if (path.empty()) {
    out << j.dump(2) << "\n";
  } else {
    write_json(path, j);
  }
}

// ---- text sources ---------------------------------------------------------------

struct TextSource {
  std::string store;
  std::string scenario;

  void add(CLI::App* app) {
    auto* a = app->add_option("--text-store", store, "EMB1 text store keyed by prompt");
    auto* b = app->add_option("--synth-scenario", scenario, "planted scenario directory (text encoder regenerated from scenario.json)");
    a->excludes(b);
  }

  void check() const {
    if (store.empty() && scenario.empty()) throw UsageError("one of --text-store or --synth-scenario is required");
    if (!store.empty()) need_file(store);
    if (!scenario.empty()) {
      need_dir(scenario);
      need_file((fs::path(scenario) / "scenario.json").string());
    }
  }

  TextEmbedFn embedder() const {
    if (!store.empty()) {
      EmbeddingStore s = load_store(store);
      return from_file(store, [&] { return store_embedder(std::move(s)); });
    }
    const std::string path = (fs::path(scenario) / "scenario.json").string();
    const PlantedParams p = from_file(path, [&] { return planted_params_from_json(load_json_file(path)); });
    return gen_planted(p).text_embed();
  }

  json config() const {
    if (!store.empty()) return {{"text_store", store}};
    return {{"synth_scenario", scenario}};
  }
};

// ---- commands ---------------------------------------------------------------------

inline json store_summary(const EmbeddingStore& s) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) worst = std::max(worst, std::abs(s.matrix.row(i).norm() - 1.0));
  json attrs = json::array();
  for (const auto& [fam, values] : s.meta.attributes) attrs.push_back(fam);
  return {{"n", s.rows()},
          {"d", s.cols()},
          {"modality", to_string(s.modality)},
          {"normalized", s.normalized},
          {"max_norm_deviation", worst},
          {"ids", s.meta.ids.has_value()},
          {"labels", s.meta.has_labels() ? (s.meta.multilabel() ? "multi" : "single") : "none"},
          {"class_names", s.meta.class_names},
          {"attributes", attrs},
          {"source", s.meta.source}};
}

struct InfoArgs {
  std::string store;
  std::string out;
};

inline int cmd_info(const InfoArgs& a, std::ostream& out) {
  const EmbeddingStore s = load_store(a.store);
  emit(a.out, envelope("info", {{"store", a.store}}, nullptr, store_summary(s)), out);
  return 0;
}

struct GeometryArgs {
  std::string image, text, out;
};

inline int cmd_geometry(const GeometryArgs& a, std::ostream& out) {
  need_file(a.image);
  need_file(a.text);
  const EmbeddingStore img = load_store(a.image);
  const EmbeddingStore txt = load_store(a.text);
  const GapReport r = gap_report(img, txt);
  if (!a.out.empty() && is_csv(a.out)) {
    write_text(a.out, to_csv(r));
    return 0;
  }
  emit(a.out, envelope("geometry", {{"image", a.image}, {"text", a.text}}, nullptr, to_json(r)), out);
  return 0;
}

struct TrainArgs {
  std::string train, val, model = "linear", loss = "ce", out, prior = "empirical";
  bool close_gap = false;
  double lambda = 1e-3;
  double lr = 1e-3;
  int epochs = 25;
  int batch = 256;
  std::uint64_t seed = 0;
  std::vector<int> hidden{512};
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const Task task = a.loss == "ce" ? Task::multiclass : a.loss == "bce" ? Task::multilabel : Task::quadratic;
  if (task == Task::quadratic && a.model != "linear") throw UsageError("--loss quad requires --model linear");
  if (task != Task::quadratic && a.val.empty()) throw UsageError("--val is required for --loss ce and bce");
  need_file(a.train);
  if (!a.val.empty()) need_file(a.val);
  need_out_parent(a.out);

  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.ridge_lambda = a.lambda;
  cfg.class_prior = a.prior == "uniform" ? ClassPrior::uniform : ClassPrior::empirical;
  cfg.validate(task);

  const EmbeddingStore tr = load_store(a.train);
  json training;
  ProbeModel model;
  if (task == Task::quadratic) {
    const Eigen::Index c = from_file(a.train, [&] { return class_count(tr.meta); });
    const Vector prior = from_file(a.train, [&] { return class_prior(tr.meta, cfg.class_prior, c); });
    Matrix x = tr.matrix;
    std::optional<Vector> mean;
    if (a.close_gap) {
      mean = column_mean(x);
      x.rowwise() -= mean->transpose();
    }
    const Matrix t = from_file(a.train, [&] { return targets_for(tr.meta, task, c, prior); });
    model = ridge_fit(x, t, a.lambda);
    model.config = cfg;
    model.seed = a.seed;
    if (mean) {
      GapClosing g;
      g.set(tr.modality == Modality::text ? Modality::text : Modality::image, *mean);
      model.gap_closing = std::move(g);
    }
    training = {{"solver", "closed_form"}, {"objective", ridge_objective(model.layers[0].weight, x, t, a.lambda)}};
  } else {
    const EmbeddingStore va = load_store(a.val);
    ProbeSpec spec;
    spec.kind = probe_kind_from_string(a.model);
    spec.task = task;
    spec.hidden = a.hidden;
    spec.close_gap = a.close_gap;
    FitResult fr = train_probe(spec, tr, va, cfg);
    model = std::move(fr.model);
    training = {{"solver", "adam"}, {"best_epoch", fr.best_epoch}, {"val_losses", fr.val_losses}};
  }
  json j = to_json(model);
  j["schema_version"] = kSchemaVersion;
  j["training"] = training;
  j["training"]["train"] = a.train;
  j["training"]["val"] = a.val.empty() ? json(nullptr) : json(a.val);
  j["training"]["loss"] = a.loss;
  j["training"]["close_gap"] = a.close_gap;
  write_json(a.out, j);
  out << "model written to " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string model, store, modality, consistency_with, out;
};

/// Model whose gap-closing means cover `m`, filling a missing one from `x`.
inline ProbeModel cover_modality(ProbeModel model, Modality m, const Matrix& x, std::string* source) {
  *source = "model";
  if (model.gap_closing && !model.gap_closing->get(m)) {
    model.gap_closing->set(m, column_mean(x));
    *source = "input";
  }
  return model;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  need_file(a.model);
  need_file(a.store);
  if (!a.consistency_with.empty()) need_file(a.consistency_with);
  const ProbeModel model = load_model_file(a.model);
  const EmbeddingStore s = load_store(a.store);
  const Modality m = a.modality.empty() ? s.modality : modality_from_string(a.modality);
  if (s.cols() != model.input_dim()) throw DataError(a.store + ": dimension " + std::to_string(s.cols()) +
                                                     " does not match the model input " + std::to_string(model.input_dim()));
  std::string mean_source;
  const Prediction p = predict(cover_modality(model, m, s.matrix, &mean_source), s.matrix, m);

  json report;
  report["n"] = s.rows();
  report["modality"] = to_string(m);
  report["gap_closing_mean"] = model.gap_closing ? json(mean_source) : json(nullptr);
  if (s.meta.has_labels()) {
    const Eigen::Index c = model.n_classes();
    const Vector prior = model.task == Task::quadratic ? class_prior(s.meta, model.config.class_prior, c) : Vector();
    const Matrix t = from_file(a.store, [&] { return targets_for(s.meta, model.task, c, prior); });
    report["metrics"] = to_json(metrics(p, t));
  } else {
    report["metrics"] = nullptr;
  }
  if (!a.consistency_with.empty()) {
    const EmbeddingStore o = load_store(a.consistency_with);
    if (o.rows() != s.rows()) throw DataError(a.consistency_with + ": row count differs from " + a.store);
    std::string other_source;
    const Prediction q = predict(cover_modality(model, o.modality, o.matrix, &other_source), o.matrix, o.modality);
    report["consistency"] = consistency(p, q);
  }
  json config = {{"model", a.model}, {"store", a.store}, {"modality", to_string(m)},
                 {"consistency_with", a.consistency_with.empty() ? json(nullptr) : json(a.consistency_with)}};
  emit(a.out, envelope("eval", config, model.seed, report), out);
  return 0;
}

struct SlicesArgs {
  std::string model, schema, templates, ensemble, images, out;
  TextSource text;
  std::size_t top_k = 10;
  double delta = 0.10;
  bool merge = false;
  double merge_epsilon = 0.02;
  std::size_t max_families = 0;
  bool absent = false;
  std::size_t ensemble_cap = 0;
};

inline int cmd_slices(const SlicesArgs& a, std::size_t threads) {
  a.text.check();
  for (const auto& p : {a.model, a.schema, a.templates}) need_file(p);
  if (!a.ensemble.empty()) need_file(a.ensemble);
  if (!a.images.empty()) need_file(a.images);
  need_out_parent(a.out);

  const ProbeModel model = load_model_file(a.model);
  const AttributeSchema schema = load_schema_file(a.schema);
  const auto templates = load_templates_file(a.templates);
  SliceEvalOptions opts;
  opts.ensemble = load_ensemble_file(a.ensemble);
  opts.generate.ensemble_cap = a.ensemble_cap;
  opts.unassigned = a.absent ? UnassignedPolicy::absent : UnassignedPolicy::marginalize;
  opts.threads = threads;
  std::optional<EmbeddingStore> images;
  if (!a.images.empty()) images = load_store(a.images);
  const TextEmbedFn embed = a.text.embedder();

  const auto slices = enumerate_slices(schema, a.max_families);
  const SliceReport report = slice_eval(model, embed, schema, templates, slices, images ? &*images : nullptr, opts);
  if (is_csv(a.out)) {
    write_text(a.out, to_csv(report));
    return 0;
  }
  DiscoverOptions d{a.top_k, a.delta, a.merge, a.merge_epsilon};
  json r = to_json(report);
  r["ranked"] = to_json(discover(report, d));
  r["correlation"] = nullptr;
  const auto with_images = std::count_if(report.rows.begin(), report.rows.end(), [](const SliceRow& row) { return row.image_accuracy.has_value(); });
  if (with_images >= 3) r["correlation"] = to_json(correlate(report));
  json config = {{"model", a.model},
                 {"schema", a.schema},
                 {"templates", a.templates},
                 {"ensemble", a.ensemble.empty() ? json(nullptr) : json(a.ensemble)},
                 {"ensemble_cap", a.ensemble_cap},
                 {"images", a.images.empty() ? json(nullptr) : json(a.images)},
                 {"text", a.text.config()},
                 {"top_k", a.top_k},
                 {"delta", a.delta},
                 {"merge", a.merge},
                 {"merge_epsilon", a.merge_epsilon},
                 {"max_families", a.max_families},
                 {"unassigned", a.absent ? "absent" : "marginalize"}};
  write_json(a.out, envelope("slices", config, model.seed, r));
  return 0;
}

struct AttrsArgs {
  std::string model, schema, templates, ensemble, class_name, out;
  TextSource text;
  bool exact = false;
  std::size_t mc = 0;
  std::uint64_t seed = 0;
  double threshold = 0.05;
  std::size_t ensemble_cap = 0;
};

inline int cmd_attrs(const AttrsArgs& a) {
  a.text.check();
  for (const auto& p : {a.model, a.schema, a.templates}) need_file(p);
  if (!a.ensemble.empty()) need_file(a.ensemble);
  need_out_parent(a.out);

  const ProbeModel model = load_model_file(a.model);
  const AttributeSchema schema = load_schema_file(a.schema);
  AttributionContext ctx;
  ctx.model = &model;
  ctx.schema = &schema;
  ctx.templates = load_templates_file(a.templates);
  ctx.ensemble = load_ensemble_file(a.ensemble);
  ctx.generate.ensemble_cap = a.ensemble_cap;
  ctx.embed = a.text.embedder();
  InfluenceOptions opts;
  opts.exact = a.mc == 0;
  opts.permutations = a.mc;
  opts.seed = a.seed;
  opts.threshold = a.threshold;
  const InfluenceReport r = influence_report(ctx, a.class_name, opts);
  if (is_csv(a.out)) {
    write_text(a.out, to_csv(r));
    return 0;
  }
  json config = {{"model", a.model},
                 {"schema", a.schema},
                 {"templates", a.templates},
                 {"ensemble", a.ensemble.empty() ? json(nullptr) : json(a.ensemble)},
                 {"ensemble_cap", a.ensemble_cap},
                 {"text", a.text.config()},
                 {"class", a.class_name},
                 {"mode", opts.exact ? "exact" : "monte_carlo"},
                 {"permutations", a.mc},
                 {"threshold", a.threshold}};
  write_json(a.out, envelope("attrs", config, a.seed, to_json(r)));
  return 0;
}

/// Slices named in a slices report: flagged error slices, or the first `top`
/// ranked slices when `top` > 0. A bare JSON array of assignments is also accepted.
inline std::vector<Slice> slices_from_file(const std::string& path, const AttributeSchema& schema, std::size_t top) {
  const json j = load_json_file(path);
  return from_file(path, [&] {
    std::vector<Slice> out;
    try {
      if (j.is_array()) {
        for (const auto& s : j) out.push_back(make_slice(schema, s.get<Assignment>()));
        return out;
      }
      const json& ranked = j.contains("report") ? j.at("report").at("ranked") : j.at("ranked");
      std::size_t k = 0;
      for (const auto& row : ranked) {
        const bool take = top > 0 ? k < top : row.at("error").get<bool>();
        ++k;
        if (take) out.push_back(make_slice(schema, row.at("assignment").get<Assignment>()));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("invalid slices file: ") + e.what());
    }
    if (out.empty()) throw DataError("no slices selected for rectification");
    return out;
  });
}

struct RectifyArgs {
  std::string model, slices, schema, templates, ensemble, eval, report, out;
  TextSource text;
  int epochs = 10;
  double lr = 1e-3;
  int batch = 256;
  std::uint64_t seed = 0;
  bool from_scratch = false;
  std::size_t top = 0;
  std::size_t ensemble_cap = 0;
};

inline int cmd_rectify(const RectifyArgs& a, std::ostream& out) {
  a.text.check();
  if (!a.report.empty() && a.eval.empty()) throw UsageError("--report needs --eval");
  for (const auto& p : {a.model, a.slices, a.schema, a.templates}) need_file(p);
  if (!a.ensemble.empty()) need_file(a.ensemble);
  if (!a.eval.empty()) need_file(a.eval);
  need_out_parent(a.out);
  if (!a.report.empty()) need_out_parent(a.report);

  const ProbeModel model = load_model_file(a.model);
  const AttributeSchema schema = load_schema_file(a.schema);
  const auto templates = load_templates_file(a.templates);
  const auto slices = slices_from_file(a.slices, schema, a.top);
  RectifyOptions opts;
  opts.train = model.config;
  opts.train.epochs = a.epochs;
  opts.train.learning_rate = a.lr;
  opts.train.batch_size = a.batch;
  opts.train.seed = a.seed;
  opts.ensemble = load_ensemble_file(a.ensemble);
  opts.generate.ensemble_cap = a.ensemble_cap;
  opts.from_scratch = a.from_scratch;
  opts.scratch_spec.kind = model.kind;
  if (model.kind == ProbeKind::mlp) {
    opts.scratch_spec.hidden.clear();
    for (std::size_t k = 0; k + 1 < model.layers.size(); ++k)
      opts.scratch_spec.hidden.push_back(static_cast<int>(model.layers[k].weight.rows()));
  }
  if (a.epochs > 0) opts.train.validate(model.task);
  const RectifyResult res = rectify(model, slices, schema, templates, a.text.embedder(), opts);

  json names = json::array();
  for (std::size_t k = 0; k < slices.size(); ++k)
    names.push_back({{"slice", slices[k].name}, {"prompts", res.prompt_counts[k]}});
  json j = to_json(res.model);
  j["schema_version"] = kSchemaVersion;
  j["rectification"] = {{"source_model", a.model},
                        {"epochs", a.epochs},
                        {"learning_rate", a.lr},
                        {"best_epoch", res.best_epoch},
                        {"from_scratch", a.from_scratch},
                        {"slices", names}};
  write_json(a.out, j);

  if (!a.eval.empty()) {
    const EmbeddingStore ev = load_store(a.eval);
    const RectifyReport rep = compare(model, res.model, ev, schema, slices);
    if (!a.report.empty() && is_csv(a.report)) {
      write_text(a.report, to_csv(rep));
    } else {
      json config = {{"model", a.model},   {"slices", a.slices},     {"schema", a.schema},
                     {"templates", a.templates}, {"ensemble", a.ensemble.empty() ? json(nullptr) : json(a.ensemble)},
                     {"eval", a.eval},     {"epochs", a.epochs},     {"learning_rate", a.lr},
                     {"from_scratch", a.from_scratch}, {"text", a.text.config()}, {"prompt_counts", res.prompt_counts}};
      emit(a.report, envelope("rectify", config, a.seed, to_json(rep)), out);
    }
  }
  return 0;
}

struct CorrelateArgs {
  std::string text_report, image_report, out;
};

inline std::vector<SliceRow> report_rows(const std::string& path) {
  const json j = load_json_file(path);
  return from_file(path, [&] { return slice_report_from_json(j.contains("report") ? j.at("report") : j).rows; });
}

inline int cmd_correlate(const CorrelateArgs& a) {
  need_file(a.text_report);
  need_file(a.image_report);
  need_out_parent(a.out);
  const auto text_rows = report_rows(a.text_report);
  const auto image_rows = report_rows(a.image_report);
  std::map<std::string, double> image_by_name;
  for (const auto& r : image_rows)
    if (r.image_accuracy) image_by_name[r.slice.name] = *r.image_accuracy;
  std::vector<SliceRow> sorted = text_rows;
  std::sort(sorted.begin(), sorted.end(), [](const SliceRow& x, const SliceRow& y) { return x.slice.name < y.slice.name; });
  std::vector<double> t, im;
  std::vector<std::string> names;
  for (const auto& r : sorted) {
    auto it = image_by_name.find(r.slice.name);
    if (it == image_by_name.end()) continue;
    t.push_back(r.proxy_score);
    im.push_back(it->second);
    names.push_back(r.slice.name);
  }
  if (t.size() < 3)
    throw DataError(a.image_report + ": fewer than 3 slices pair up with " + a.text_report);
  const CorrelationReport r = correlate(t, im, names);
  if (is_csv(a.out)) {
    write_text(a.out, to_csv(r));
    return 0;
  }
  write_json(a.out, envelope("correlate", {{"text_report", a.text_report}, {"image_report", a.image_report}}, nullptr, to_json(r)));
  return 0;
}

struct PromptsArgs {
  std::string schema, templates, ensemble, out;
  std::size_t ensemble_cap = 0;
};

inline std::string manifest(const PromptSet& prompts) {
  std::string s;
  for (const auto& p : prompts) {
    if (p.text.find('\n') != std::string::npos) throw DataError("prompt contains a newline: " + p.text);
    s += p.text;
    s += '\n';
  }
  return s;
}

inline int cmd_prompts(const PromptsArgs& a) {
  need_file(a.schema);
  need_file(a.templates);
  if (!a.ensemble.empty()) need_file(a.ensemble);
  need_out_parent(a.out);
  const AttributeSchema schema = load_schema_file(a.schema);
  GenerateOptions g;
  g.ensemble_cap = a.ensemble_cap;
  write_text(a.out, manifest(prompt_universe(schema, load_templates_file(a.templates), load_ensemble_file(a.ensemble), g)));
  return 0;
}

// ---- synth ----------------------------------------------------------------------

inline void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory: " + dir);
}

inline std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

inline int cmd_synth_prop1(const Prop1Params& p, const std::string& dir) {
  p.validate();
  make_out_dir(dir);
  const Prop1World w = gen_prop1(p);
  write_store(w.image, in_dir(dir, "img.emb"));
  write_store(w.text, in_dir(dir, "txt.emb"));
  json params = {{"d", p.d},         {"n", p.n},         {"classes", p.classes},
                 {"gap_norm", p.gap_norm}, {"tau", p.tau}, {"class_separation", p.class_separation},
                 {"noise", p.noise}, {"seed", p.seed}};
  write_json(in_dir(dir, "world.json"),
             envelope("synth prop1", params, p.seed, {{"gap", vec_json(w.gap)}, {"gap_axis", w.gap_axis}}));
  return 0;
}

inline int cmd_synth_planted(const PlantedParams& p, const std::string& ensemble_path, std::size_t ensemble_cap,
                             const std::string& dir) {
  p.validate();
  if (!ensemble_path.empty()) need_file(ensemble_path);
  const auto ensemble = load_ensemble_file(ensemble_path);
  make_out_dir(dir);
  const PlantedWorld w = gen_planted(p);
  write_store(w.train, in_dir(dir, "train.emb"));
  write_store(w.val, in_dir(dir, "val.emb"));
  write_json(in_dir(dir, "schema.json"), to_json(w.schema));
  write_json(in_dir(dir, "templates.json"), json(w.templates));
  write_json(in_dir(dir, "scenario.json"), to_json(p));

  std::vector<Template> templates;
  for (const auto& t : w.templates) templates.push_back(parse_template(t));
  GenerateOptions g;
  g.ensemble_cap = ensemble_cap;
  const PromptSet prompts = prompt_universe(w.schema, templates, ensemble, g);
  EmbeddingStore text;
  text.modality = Modality::text;
  text.matrix = embed_prompts(prompts, w.text_embed());
  text.meta.ids.emplace();
  for (const auto& pr : prompts) text.meta.ids->push_back(pr.text);
  text.meta.source = "synth planted seed " + std::to_string(p.seed) + " text";
  write_store(text, in_dir(dir, "text.emb"));
  return 0;
}

struct CheckArgs {
  int seeds = 100;
  std::uint64_t seed = 0;
  int n = 8;
  int dim = 6;
  int mixtures = 3;
  double scale = 2.0;
  // classmean
  int m = 6;
  int d = 12;
  int classes = 2;
  bool violate = false;
};

inline int cmd_synth_spectral(const CheckArgs& a, const std::string& dir) {
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  make_out_dir(dir);
  json rows = json::array();
  double worst = 0.0, worst_scale = 0.0;
  for (int k = 0; k < a.seeds; ++k) {
    const std::uint64_t s = a.seed + static_cast<std::uint64_t>(k);
    const SpectralCheck c = spectral_identity_check(a.n, a.dim, s, a.mixtures);
    const ScalingCheck sc = scaling_check(a.n, a.dim, a.scale, s);
    worst = std::max(worst, c.residual);
    worst_scale = std::max(worst_scale, sc.loss_change);
    rows.push_back({{"seed", s},
                    {"residual", c.residual},
                    {"loss", c.loss},
                    {"frobenius", c.frobenius},
                    {"sum_p2", c.sum_p2},
                    {"scaling_loss_change", sc.loss_change},
                    {"gap_before", sc.gap_before},
                    {"gap_after", sc.gap_after}});
  }
  json config = {{"seeds", a.seeds}, {"n", a.n}, {"dim", a.dim}, {"mixtures", a.mixtures}, {"scale", a.scale}};
  write_json(in_dir(dir, "spectral.json"),
             envelope("synth spectral", config, a.seed,
                      {{"max_residual", worst}, {"max_scaling_loss_change", worst_scale}, {"runs", rows}}));
  return 0;
}

inline int cmd_synth_classmean(const CheckArgs& a, const std::string& dir) {
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  make_out_dir(dir);
  json rows = json::array();
  double worst = 0.0;
  for (int k = 0; k < a.seeds; ++k) {
    ClassMeanParams p;
    p.n = a.n;
    p.m = a.m;
    p.d = a.d;
    p.classes = a.classes;
    p.violate = a.violate;
    p.seed = a.seed + static_cast<std::uint64_t>(k);
    const ClassMeanCheck c = classmean_check(p);
    worst = std::max(worst, c.residual);
    rows.push_back({{"seed", p.seed}, {"residual", c.residual}, {"attempts", c.attempts}});
  }
  json config = {{"seeds", a.seeds}, {"n", a.n}, {"m", a.m}, {"d", a.d}, {"classes", a.classes}, {"violate", a.violate}};
  write_json(in_dir(dir, "classmean.json"),
             envelope("synth classmean", config, a.seed, {{"max_residual", worst}, {"runs", rows}}));
  return 0;
}

inline std::vector<std::pair<int, int>> parse_combos(const std::vector<std::string>& specs) {
  std::vector<std::pair<int, int>> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError("--unseen expects CLASS:NUISANCE, got '" + s + "'");
    try {
      out.emplace_back(std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1)));
    } catch (const std::exception&) {
      throw UsageError("--unseen expects CLASS:NUISANCE, got '" + s + "'");
    }
  }
  return out;
}

}  // namespace detail

/// Parses `args` (program name excluded) and runs one subcommand.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"xdiag: diagnose and rectify classifiers on a shared image-text embedding space", "xdiag"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for parallel stages")->check(CLI::Range(1, 256));

  InfoArgs info;
  auto* c_info = app.add_subcommand("info", "summarize an EMB1 store");
  c_info->add_option("store", info.store, "store path")->required();
  c_info->add_option("--out", info.out, "write the summary here instead of stdout");

  GeometryArgs geo;
  auto* c_geo = app.add_subcommand("geometry", "modality gap statistics of paired stores");
  c_geo->add_option("--image", geo.image, "image store")->required();
  c_geo->add_option("--text", geo.text, "text store")->required();
  c_geo->add_option("--out", geo.out, "report path (.json or .csv); stdout when omitted");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a probe on an embedding store");
  c_train->add_option("--train", tr.train, "training store")->required();
  c_train->add_option("--val", tr.val, "validation store (model selection)");
  c_train->add_option("--model", tr.model, "linear or mlp")->check(CLI::IsMember({"linear", "mlp"}));
  c_train->add_option("--loss", tr.loss, "ce, bce or quad")->check(CLI::IsMember({"ce", "bce", "quad"}));
  c_train->add_flag("--close-gap", tr.close_gap, "subtract the training-modality mean");
  c_train->add_option("--lambda", tr.lambda, "ridge penalty for --loss quad");
  c_train->add_option("--lr", tr.lr, "Adam learning rate");
  c_train->add_option("--epochs", tr.epochs, "training epochs");
  c_train->add_option("--batch-size", tr.batch, "minibatch size");
  c_train->add_option("--hidden", tr.hidden, "mlp hidden widths, comma separated")->delimiter(',');
  c_train->add_option("--prior", tr.prior, "class prior for balanced targets")->check(CLI::IsMember({"empirical", "uniform"}));
  c_train->add_option("--seed", tr.seed, "initialization and shuffling seed");
  c_train->add_option("--out", tr.out, "model file")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a probe on a store");
  c_eval->add_option("--model", ev.model, "model file")->required();
  c_eval->add_option("--store", ev.store, "store to evaluate")->required();
  c_eval->add_option("--modality", ev.modality, "override the store's modality")->check(CLI::IsMember({"image", "text"}));
  c_eval->add_option("--consistency-with", ev.consistency_with, "paired store of the other modality");
  c_eval->add_option("--out", ev.out, "report path; stdout when omitted");

  SlicesArgs sl;
  auto* c_slices = app.add_subcommand("slices", "rank attribute slices by text proxy score");
  c_slices->add_option("--model", sl.model, "model file")->required();
  c_slices->add_option("--schema", sl.schema, "attribute schema JSON")->required();
  c_slices->add_option("--templates", sl.templates, "template JSON array")->required();
  c_slices->add_option("--ensemble", sl.ensemble, "ensemble template JSON array");
  c_slices->add_option("--ensemble-cap", sl.ensemble_cap, "use only the first N ensemble templates");
  sl.text.add(c_slices);
  c_slices->add_option("--images", sl.images, "labelled image store for slice accuracy");
  c_slices->add_option("--top-k", sl.top_k, "ranked slices to keep (0 = all)");
  c_slices->add_option("--delta", sl.delta, "error threshold below the global proxy");
  c_slices->add_flag("--merge", sl.merge, "drop refinements scoring close to a coarser slice");
  c_slices->add_option("--merge-epsilon", sl.merge_epsilon, "score tolerance for --merge");
  c_slices->add_option("--max-families", sl.max_families, "families per slice (0 = all)");
  c_slices->add_flag("--absent", sl.absent, "drop unassigned families instead of marginalizing them");
  c_slices->add_option("--out", sl.out, "report path (.json or .csv)")->required();

  AttrsArgs at;
  auto* c_attrs = app.add_subcommand("attrs", "Shapley influence of attribute tokens on a class");
  c_attrs->add_option("--model", at.model, "model file")->required();
  c_attrs->add_option("--schema", at.schema, "attribute schema JSON")->required();
  c_attrs->add_option("--templates", at.templates, "template JSON array")->required();
  c_attrs->add_option("--ensemble", at.ensemble, "ensemble template JSON array");
  c_attrs->add_option("--ensemble-cap", at.ensemble_cap, "use only the first N ensemble templates");
  at.text.add(c_attrs);
  c_attrs->add_option("--class", at.class_name, "class value to explain")->required();
  auto* o_exact = c_attrs->add_flag("--exact", at.exact, "exact Shapley values (default)");
  auto* o_mc = c_attrs->add_option("--mc", at.mc, "Monte-Carlo permutations")->check(CLI::PositiveNumber);
  o_exact->excludes(o_mc);
  c_attrs->add_option("--seed", at.seed, "Monte-Carlo seed");
  c_attrs->add_option("--threshold", at.threshold, "|influence| marking an influential token");
  c_attrs->add_option("--out", at.out, "report path (.json or .csv)")->required();

  RectifyArgs rc;
  auto* c_rect = app.add_subcommand("rectify", "continue training on text prompts for error slices");
  c_rect->add_option("--model", rc.model, "model file")->required();
  c_rect->add_option("--slices", rc.slices, "slices report (error slices) or JSON array of assignments")->required();
  c_rect->add_option("--schema", rc.schema, "attribute schema JSON")->required();
  c_rect->add_option("--templates", rc.templates, "template JSON array")->required();
  c_rect->add_option("--ensemble", rc.ensemble, "ensemble template JSON array");
  c_rect->add_option("--ensemble-cap", rc.ensemble_cap, "use only the first N ensemble templates");
  rc.text.add(c_rect);
  c_rect->add_option("--epochs", rc.epochs, "rectification epochs")->check(CLI::NonNegativeNumber);
  c_rect->add_option("--lr", rc.lr, "Adam learning rate");
  c_rect->add_option("--batch-size", rc.batch, "minibatch size");
  c_rect->add_option("--seed", rc.seed, "shuffling seed");
  c_rect->add_option("--top", rc.top, "take the first N ranked slices instead of flagged ones");
  c_rect->add_flag("--from-scratch", rc.from_scratch, "train a fresh model on the texts only");
  c_rect->add_option("--eval", rc.eval, "labelled image store for before/after comparison");
  c_rect->add_option("--report", rc.report, "comparison report path (.json or .csv); stdout when omitted");
  c_rect->add_option("--out", rc.out, "rectified model file")->required();

  CorrelateArgs co;
  auto* c_corr = app.add_subcommand("correlate", "rank correlation of text proxy and image accuracy per slice");
  c_corr->add_option("--text-report", co.text_report, "slices report supplying proxy scores")->required();
  c_corr->add_option("--image-report", co.image_report, "slices report supplying image accuracies")->required();
  c_corr->add_option("--out", co.out, "report path (.json or .csv)")->required();

  PromptsArgs pr;
  auto* c_prompts = app.add_subcommand("prompts", "write the prompt manifest for a text encoder");
  c_prompts->add_option("--schema", pr.schema, "attribute schema JSON")->required();
  c_prompts->add_option("--templates", pr.templates, "template JSON array")->required();
  c_prompts->add_option("--ensemble", pr.ensemble, "ensemble template JSON array");
  c_prompts->add_option("--ensemble-cap", pr.ensemble_cap, "use only the first N ensemble templates");
  c_prompts->add_option("--out", pr.out, "newline-delimited manifest")->required();

  auto* c_synth = app.add_subcommand("synth", "synthetic worlds and numerical checks");
  c_synth->require_subcommand(1);
  std::string synth_out;

  Prop1Params p1;
  auto* s_p1 = c_synth->add_subcommand("prop1", "paired stores with a constant gap");
  s_p1->add_option("--d", p1.d, "dimension");
  s_p1->add_option("--n", p1.n, "pairs");
  s_p1->add_option("--classes", p1.classes, "classes");
  s_p1->add_option("--gap-norm", p1.gap_norm, "gap length");
  s_p1->add_option("--tau", p1.tau, "image offset along the gap, in gap lengths");
  s_p1->add_option("--separation", p1.class_separation, "class center norm");
  s_p1->add_option("--noise", p1.noise, "within-class noise");
  s_p1->add_option("--seed", p1.seed, "seed");
  s_p1->add_option("--out", synth_out, "output directory")->required();

  PlantedParams pp;
  std::vector<std::string> unseen;
  std::string planted_ensemble;
  std::size_t planted_cap = 0;
  auto* s_pl = c_synth->add_subcommand("planted", "spurious-correlation scenario");
  s_pl->add_option("--classes", pp.n_classes, "classes");
  s_pl->add_option("--nuisance", pp.n_nuisance, "nuisance values");
  s_pl->add_option("--correlation", pp.correlation, "P(majority nuisance | class) in training");
  s_pl->add_option("--unseen", unseen, "CLASS:NUISANCE combos absent from training");
  s_pl->add_option("--n-train", pp.n_train, "training images");
  s_pl->add_option("--n-val", pp.n_val, "balanced validation images");
  s_pl->add_option("--d", pp.d, "dimension");
  s_pl->add_option("--class-scale", pp.class_scale, "class direction scale");
  s_pl->add_option("--nuisance-scale", pp.nuisance_scale, "nuisance direction scale");
  s_pl->add_option("--noise", pp.noise, "image noise");
  s_pl->add_option("--text-noise", pp.text_noise, "text noise (negative = 0.01 * class scale)");
  s_pl->add_option("--gap-norm", pp.gap_norm, "gap length");
  s_pl->add_option("--seed", pp.seed, "seed");
  s_pl->add_option("--ensemble", planted_ensemble, "ensemble templates to include in text.emb");
  s_pl->add_option("--ensemble-cap", planted_cap, "use only the first N ensemble templates");
  s_pl->add_option("--out", synth_out, "output directory")->required();

  CheckArgs sp;
  auto* s_sp = c_synth->add_subcommand("spectral", "loss identity and scaling checks on random graphs");
  s_sp->add_option("--seeds", sp.seeds, "number of seeds");
  s_sp->add_option("--seed", sp.seed, "first seed");
  s_sp->add_option("--n", sp.n, "images = texts");
  s_sp->add_option("--dim", sp.dim, "factor dimension");
  s_sp->add_option("--mixtures", sp.mixtures, "permutations averaged into P");
  s_sp->add_option("--scale", sp.scale, "scale c for the (cF, G/c) check");
  s_sp->add_option("--out", synth_out, "output directory")->required();

  CheckArgs cm;
  cm.seeds = 50;
  auto* s_cm = c_synth->add_subcommand("classmean", "class-mean transfer head check");
  s_cm->add_option("--seeds", cm.seeds, "number of seeds");
  s_cm->add_option("--seed", cm.seed, "first seed");
  s_cm->add_option("--n", cm.n, "images");
  s_cm->add_option("--m", cm.m, "texts");
  s_cm->add_option("--d", cm.d, "factor dimension");
  s_cm->add_option("--classes", cm.classes, "classes");
  s_cm->add_flag("--violate", cm.violate, "break the class-block condition");
  s_cm->add_option("--out", synth_out, "output directory")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return 1;
  }

  try {
    if (c_info->parsed()) return cmd_info(info, out);
    if (c_geo->parsed()) return cmd_geometry(geo, out);
    if (c_train->parsed()) return cmd_train(tr, out);
    if (c_eval->parsed()) return cmd_eval(ev, out);
    if (c_slices->parsed()) return cmd_slices(sl, threads);
    if (c_attrs->parsed()) return cmd_attrs(at);
    if (c_rect->parsed()) return cmd_rectify(rc, out);
    if (c_corr->parsed()) return cmd_correlate(co);
    if (c_prompts->parsed()) return cmd_prompts(pr);
    if (s_p1->parsed()) return cmd_synth_prop1(p1, synth_out);
    if (s_pl->parsed()) {
      pp.unseen_combos = parse_combos(unseen);
      return cmd_synth_planted(pp, planted_ensemble, planted_cap, synth_out);
    }
    if (s_sp->parsed()) return cmd_synth_spectral(sp, synth_out);
    if (s_cm->parsed()) return cmd_synth_classmean(cm, synth_out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace xdiag::cli
