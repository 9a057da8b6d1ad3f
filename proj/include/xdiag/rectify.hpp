#pragma once

// Rectification: continued training of a probe on text embeddings generated
// for error slices, and before/after comparison on labelled images.

#include "xdiag/diagnose.hpp"
#include "xdiag/train.hpp"

#include <json.hpp>

namespace xdiag {

struct RectifyOptions {
  TrainConfig train = [] {
    TrainConfig c;
    c.epochs = 10;
    return c;
  }();
  std::vector<EnsembleTemplate> ensemble;
  GenerateOptions generate;
  UnassignedPolicy unassigned = UnassignedPolicy::marginalize;
  bool from_scratch = false;  // train a fresh model on the texts only
  ProbeSpec scratch_spec;     // shape used when from_scratch is set
  // Optional replay of original training data mixed into the text set.
  std::optional<TrainingData> replay;
};

struct RectifyResult {
  ProbeModel model;
  std::vector<std::size_t> prompt_counts;  // per slice
  int epochs = 0;
  int best_epoch = 0;
};

/// Text training set for `slices`: prompts per slice with labels from the class
/// value each prompt carries.
inline TrainingData rectification_data(const ProbeModel& model, const std::vector<Slice>& slices,
                                       const AttributeSchema& schema, const std::vector<Template>& templates,
                                       const RectifyOptions& opts, const TextEmbedFn& embed,
                                       std::vector<std::size_t>* counts) {
  PromptSet all;
  for (const auto& s : slices) {
    PromptSet ps = slice_prompts(schema, s.assignment, templates, opts.ensemble, opts.generate, opts.unassigned);
    if (ps.empty()) throw DataError("slice '" + s.name + "' generated no prompts");
    if (counts) counts->push_back(ps.size());
    all.insert(all.end(), ps.begin(), ps.end());
  }
  require(!all.empty(), "rectification prompt set is empty");
  std::vector<int> labels;
  for (const auto& p : all) {
    const auto l = schema.label_of(p.assignment);
    if (!l) throw DataError("rectification prompt has no class label: " + p.text);
    labels.push_back(*l);
  }
  const Matrix x = preprocess(model, embed_prompts(all, embed), Modality::text);
  const Eigen::Index c = model.n_classes();
  switch (model.task) {
    case Task::multiclass: return {x, one_hot(labels, c)};
    case Task::multilabel: return {x, one_hot(labels, c)};
    case Task::quadratic: break;
  }
  throw ConfigError("rectification supports multiclass and multilabel models");
}

/// Continues training a copy of `model` on the slices' text embeddings. The
/// snapshot with the lowest loss on the rectification texts is returned.
/// Zero epochs returns the input model unchanged.
inline RectifyResult rectify(const ProbeModel& model_in, const std::vector<Slice>& slices, const AttributeSchema& schema,
                             const std::vector<Template>& templates, const TextEmbedFn& embed, const RectifyOptions& opts) {
  require(!slices.empty(), "no slices to rectify");
  if (model_in.task == Task::quadratic) throw ConfigError("rectification supports multiclass and multilabel models");
  RectifyResult res{model_in, {}, opts.train.epochs, 0};
  const ProbeModel model = with_text_mean(model_in, schema, templates, opts.ensemble, opts.generate, embed);
  TrainingData data = rectification_data(model, slices, schema, templates, opts, embed, &res.prompt_counts);
  if (opts.train.epochs == 0) return res;

  TrainingData train = data;
  if (opts.replay) {
    require(opts.replay->x.cols() == data.x.cols() && opts.replay->targets.cols() == data.targets.cols(),
            "replay data shape mismatch");
    Matrix x(train.x.rows() + opts.replay->x.rows(), train.x.cols());
    x << train.x, opts.replay->x;
    Matrix t(train.targets.rows() + opts.replay->targets.rows(), train.targets.cols());
    t << train.targets, opts.replay->targets;
    train = {std::move(x), std::move(t)};
  }
  ProbeModel start = model;
  if (opts.from_scratch) {
    ProbeSpec spec = opts.scratch_spec;
    spec.task = model.task;
    start = init_model(spec, model.input_dim(), model.n_classes(), opts.train.seed);
    start.gap_closing = model.gap_closing;
  }
  FitResult fr = fit(std::move(start), train, data, opts.train);
  res.model = std::move(fr.model);
  res.model.seed = model_in.seed;
  res.best_epoch = fr.best_epoch;
  return res;
}

struct RectifyRow {
  std::string name;
  std::size_t n = 0;
  std::optional<double> accuracy_before;
  std::optional<double> accuracy_after;
  std::optional<double> delta;
};

struct RectifyReport {
  std::vector<RectifyRow> rows;
  double global_before = 0.0;
  double global_after = 0.0;
  double global_delta = 0.0;
};

/// Per-slice and global hard accuracy of two models on a labelled image store.
inline RectifyReport compare(const ProbeModel& before, const ProbeModel& after, const EmbeddingStore& eval,
                             const AttributeSchema& schema, const std::vector<Slice>& slices) {
  require(eval.meta.has_labels() && !eval.meta.multilabel(), "comparison store needs single labels");
  const Prediction pb = predict(before, eval.matrix, Modality::image);
  const Prediction pa = predict(after, eval.matrix, Modality::image);
  auto acc = [&](const Prediction& p, const std::vector<Eigen::Index>& rows) {
    double c = 0.0;
    for (auto i : rows) c += p.classes[static_cast<std::size_t>(i)] == label_of(eval, i) ? 1.0 : 0.0;
    return c / static_cast<double>(rows.size());
  };
  std::vector<Eigen::Index> all(static_cast<std::size_t>(eval.rows()));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  RectifyReport r;
  r.global_before = acc(pb, all);
  r.global_after = acc(pa, all);
  r.global_delta = r.global_after - r.global_before;
  for (const auto& s : slices) {
    RectifyRow row;
    row.name = s.name;
    const auto rows = matching_rows(eval, schema, s.assignment);
    row.n = rows.size();
    if (!rows.empty()) {
      row.accuracy_before = acc(pb, rows);
      row.accuracy_after = acc(pa, rows);
      row.delta = *row.accuracy_after - *row.accuracy_before;
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

inline nlohmann::json to_json(const RectifyReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"slice", row.name},
                    {"n", row.n},
                    {"accuracy_before", opt_json(row.accuracy_before)},
                    {"accuracy_after", opt_json(row.accuracy_after)},
                    {"delta", opt_json(row.delta)}});
  return {{"rows", rows},
          {"global", {{"accuracy_before", r.global_before}, {"accuracy_after", r.global_after}, {"delta", r.global_delta}}}};
}

inline std::string to_csv(const RectifyReport& r) {
  std::ostringstream os;
  os << "slice,n,original,rectified,delta\n";
  for (const auto& row : r.rows)
    os << detail::csv_escape(row.name) << ',' << row.n << ',' << detail::csv_num(row.accuracy_before) << ','
       << detail::csv_num(row.accuracy_after) << ',' << detail::csv_num(row.delta) << '\n';
  os << "global," << "," << detail::csv_num(r.global_before) << ',' << detail::csv_num(r.global_after) << ','
     << detail::csv_num(r.global_delta) << '\n';
  return os.str();
}

}  // namespace xdiag
