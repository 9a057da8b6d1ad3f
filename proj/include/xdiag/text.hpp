#pragma once

// Text-embedding sources for generated prompts.

#include "xdiag/geometry.hpp"
#include "xdiag/probe.hpp"
#include "xdiag/prompts.hpp"
#include "xdiag/store.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

namespace xdiag {

using TextEmbedFn = std::function<Vector(const Prompt&)>;

class MissingPrompt : public DataError {
 public:
  explicit MissingPrompt(std::string prompt) : DataError("prompt missing from text store: " + prompt), prompt_(std::move(prompt)) {}
  const std::string& prompt() const { return prompt_; }

 private:
  std::string prompt_;
};

/// Looks prompts up verbatim among the store's row ids.
inline TextEmbedFn store_embedder(EmbeddingStore store) {
  require(store.meta.ids.has_value(), "text store has no ids; prompt lookup needs one id per row");
  auto shared = std::make_shared<const EmbeddingStore>(std::move(store));
  auto index = std::make_shared<std::unordered_map<std::string, Eigen::Index>>();
  for (std::size_t i = 0; i < shared->meta.ids->size(); ++i) index->emplace((*shared->meta.ids)[i], static_cast<Eigen::Index>(i));
  return [shared, index](const Prompt& p) -> Vector {
    auto it = index->find(p.text);
    if (it == index->end()) throw MissingPrompt(p.text);
    return shared->matrix.row(it->second).transpose();
  };
}

/// Embeds every prompt; reports all missing prompts at once.
inline Matrix embed_prompts(const PromptSet& prompts, const TextEmbedFn& embed) {
  Matrix out;
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      const Vector v = embed(prompts[i]);
      if (out.size() == 0) out.resize(static_cast<Eigen::Index>(prompts.size()), v.size());
      require(v.size() == out.cols(), "text embeddings differ in dimension");
      out.row(static_cast<Eigen::Index>(i)) = v.transpose();
    } catch (const MissingPrompt& e) {
      missing.push_back(e.prompt());
    }
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " prompt(s) missing from text store:";
    for (std::size_t k = 0; k < missing.size() && k < 20; ++k) msg += "\n  " + missing[k];
    if (missing.size() > 20) msg += "\n  ...";
    throw DataError(msg);
  }
  return out;
}

/// Every family marginalized: the full prompt universe of a schema.
inline PromptSet all_prompts(const AttributeSchema& schema, const std::vector<Template>& templates,
                             const std::vector<EnsembleTemplate>& ensemble = {}, const GenerateOptions& opts = {}) {
  std::vector<std::string> fams;
  for (const auto& f : schema.families) fams.push_back(f.name);
  return generate(schema, {}, fams, templates, ensemble, opts);
}

/// Every prompt any slice, attribution or rectification run can request: the
/// class family marginalized and each other family either marginalized or
/// absent. Duplicates are dropped, first occurrence kept.
inline PromptSet prompt_universe(const AttributeSchema& schema, const std::vector<Template>& templates,
                                 const std::vector<EnsembleTemplate>& ensemble = {}, const GenerateOptions& opts = {}) {
  const auto others = schema.non_class_families();
  require(others.size() < 31, "too many families for the prompt universe");
  PromptSet out;
  std::unordered_set<std::string> seen;
  for (std::uint32_t mask = (1u << others.size()); mask-- > 0;) {
    std::vector<std::string> marg;
    for (const auto& f : schema.families) {
      if (f.name == schema.class_family) {
        marg.push_back(f.name);
        continue;
      }
      const auto k = static_cast<std::size_t>(std::find(others.begin(), others.end(), f.name) - others.begin());
      if ((mask >> k) & 1u) marg.push_back(f.name);
    }
    // templates that cannot drop an absent family contribute nothing for this mask
    std::vector<Template> usable;
    std::vector<std::size_t> origin;
    for (std::size_t ti = 0; ti < templates.size(); ++ti) {
      const auto& t = templates[ti];
      const auto req = t.mandatory_families();
      if (std::all_of(req.begin(), req.end(), [&](const std::string& f) {
            return std::find(marg.begin(), marg.end(), f) != marg.end();
          })) {
        usable.push_back(t);
        origin.push_back(ti);
      }
    }
    if (usable.empty()) continue;
    for (auto& p : generate(schema, {}, marg, usable, ensemble, opts)) {
      p.template_index = origin[p.template_index];
      if (seen.insert(p.text).second) out.push_back(std::move(p));
    }
  }
  return out;
}

/// For gap-closing models lacking a text mean, records the mean text embedding
/// over the schema's full prompt universe.
inline ProbeModel with_text_mean(ProbeModel model, const AttributeSchema& schema, const std::vector<Template>& templates,
                                 const std::vector<EnsembleTemplate>& ensemble, const GenerateOptions& opts,
                                 const TextEmbedFn& embed) {
  if (!model.gap_closing || model.gap_closing->text) return model;
  model.gap_closing->text = column_mean(embed_prompts(all_prompts(schema, templates, ensemble, opts), embed));
  return model;
}

}  // namespace xdiag
