#pragma once

// Error-slice evaluation and discovery from generated prompts, Shapley
// attribute influence, and text/image slice correlation.

#include "xdiag/metrics.hpp"
#include "xdiag/parallel.hpp"
#include "xdiag/probe.hpp"
#include "xdiag/prompts.hpp"
#include "xdiag/store.hpp"
#include "xdiag/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <unordered_map>

namespace xdiag {

// ---- slices -------------------------------------------------------------------

struct Slice {
  Assignment assignment;
  std::string name;
};

/// Slice with a display name listing families in schema order.
inline Slice make_slice(const AttributeSchema& schema, Assignment assignment) {
  require(!assignment.empty(), "a slice assigns at least one family");
  std::string name;
  for (const auto& f : schema.families) {
    auto it = assignment.find(f.name);
    if (it == assignment.end()) continue;
    if (!schema.has_value(f.name, it->second))
      throw DataError("slice value '" + it->second + "' is not a value of '" + f.name + "'");
    if (!name.empty()) name += ", ";
    name += f.name + "=" + it->second;
  }
  for (const auto& [fam, value] : assignment)
    if (!schema.has_family(fam)) throw DataError("slice family '" + fam + "' is not in the schema");
  return {std::move(assignment), std::move(name)};
}

/// Every non-empty family subset with every value combination, up to
/// `max_families` families per slice (0 = no limit). Ordered by subset size,
/// then schema order, then value order.
inline std::vector<Slice> enumerate_slices(const AttributeSchema& schema, std::size_t max_families = 0) {
  const std::size_t nf = schema.families.size();
  require(nf < 31, "too many families to enumerate slices");
  if (max_families == 0) max_families = nf;
  std::vector<std::uint32_t> masks;
  for (std::uint32_t m = 1; m < (1u << nf); ++m)
    if (static_cast<std::size_t>(std::popcount(m)) <= max_families) masks.push_back(m);
  std::stable_sort(masks.begin(), masks.end(), [](std::uint32_t a, std::uint32_t b) {
    if (std::popcount(a) != std::popcount(b)) return std::popcount(a) < std::popcount(b);
    // lower schema index first: compare reversed bit order
    for (int k = 0; k < 31; ++k) {
      const bool ba = (a >> k) & 1u, bb = (b >> k) & 1u;
      if (ba != bb) return ba;
    }
    return false;
  });
  std::vector<Slice> out;
  for (std::uint32_t m : masks) {
    std::vector<std::string> fams;
    for (std::size_t k = 0; k < nf; ++k)
      if ((m >> k) & 1u) fams.push_back(schema.families[k].name);
    Template probe;  // a template naming every selected family lets generate() enumerate the combinations
    for (const auto& f : fams) probe.segments.push_back(Placeholder{f});
    for (const auto& p : generate(schema, {}, fams, {probe})) out.push_back(make_slice(schema, p.assignment));
  }
  return out;
}

enum class UnassignedPolicy { marginalize, absent };

struct SliceEvalOptions {
  std::vector<EnsembleTemplate> ensemble;
  GenerateOptions generate;
  // Families a slice leaves unassigned; the class family is always marginalized.
  UnassignedPolicy unassigned = UnassignedPolicy::marginalize;
  std::size_t threads = 1;
};

/// Prompts for a slice: its assignment fixed, the class family marginalized when
/// unassigned, other unassigned families marginalized or absent per policy.
inline PromptSet slice_prompts(const AttributeSchema& schema, const Assignment& assignment,
                               const std::vector<Template>& templates, const std::vector<EnsembleTemplate>& ensemble,
                               const GenerateOptions& gen, UnassignedPolicy policy) {
  std::vector<std::string> marg;
  for (const auto& f : schema.families) {
    if (assignment.count(f.name)) continue;
    if (f.name == schema.class_family || policy == UnassignedPolicy::marginalize) marg.push_back(f.name);
  }
  return generate(schema, assignment, marg, templates, ensemble, gen);
}

/// Rows of `store` whose metadata matches every (family, value) of `a`. A family
/// missing from the attributes matches through class names when it is the class family.
inline std::vector<Eigen::Index> matching_rows(const EmbeddingStore& store, const AttributeSchema& schema, const Assignment& a) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < store.rows(); ++i) {
    bool ok = true;
    for (const auto& [fam, value] : a) {
      auto it = store.meta.attributes.find(fam);
      if (it != store.meta.attributes.end()) {
        ok = it->second[static_cast<std::size_t>(i)] == value;
      } else if (fam == schema.class_family && store.meta.has_labels() && !store.meta.multilabel() &&
                 !store.meta.class_names.empty()) {
        ok = store.meta.class_names[static_cast<std::size_t>(label_of(store, i))] == value;
      } else {
        ok = false;
      }
      if (!ok) break;
    }
    if (ok) out.push_back(i);
  }
  return out;
}

struct SliceRow {
  Slice slice;
  std::size_t n_text_prompts = 0;
  double proxy_score = 0.0;    // mean probability of each prompt's own class
  double text_accuracy = 0.0;
  std::optional<std::size_t> image_n;
  std::optional<double> image_accuracy;
};

struct SliceReport {
  std::vector<SliceRow> rows;  // ascending proxy_score, ties by name
  double global_proxy = 0.0;   // mean of row proxy scores
  std::optional<double> global_error;
};

namespace detail {

inline void sort_rows(std::vector<SliceRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const SliceRow& a, const SliceRow& b) {
    if (a.proxy_score != b.proxy_score) return a.proxy_score < b.proxy_score;
    return a.slice.name < b.slice.name;
  });
}

inline double mean_proxy(std::vector<SliceRow> rows) {
  if (rows.empty()) return 0.0;
  std::sort(rows.begin(), rows.end(), [](const SliceRow& a, const SliceRow& b) { return a.slice.name < b.slice.name; });
  double s = 0.0;
  for (const auto& r : rows) s += r.proxy_score;
  return s / static_cast<double>(rows.size());
}

/// Per-row correctness of hard predictions against the expected class.
inline bool hit(const Prediction& p, Eigen::Index i, int label) {
  if (p.task == Task::multilabel) return p.positives(i, label) != 0;
  return p.classes[static_cast<std::size_t>(i)] == label;
}

}  // namespace detail

inline SliceReport slice_eval(const ProbeModel& model_in, const TextEmbedFn& embed, const AttributeSchema& schema,
                              const std::vector<Template>& templates, const std::vector<Slice>& slices,
                              const EmbeddingStore* images, const SliceEvalOptions& opts = {}) {
  const ProbeModel model = with_text_mean(model_in, schema, templates, opts.ensemble, opts.generate, embed);
  require(static_cast<std::size_t>(model.n_classes()) == schema.class_value_to_label.size(),
          "model output size does not match the schema's class count");
  SliceReport report;
  report.rows.resize(slices.size());

  std::optional<Prediction> img_pred;
  if (images) {
    img_pred = predict(model, images->matrix, Modality::image);
    require(images->meta.has_labels(), "image store needs labels for slice accuracy");
    double correct = 0.0, total = 0.0;
    for (Eigen::Index i = 0; i < images->rows(); ++i) {
      if (images->meta.multilabel()) {
        const auto& truth = images->meta.multi()[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 0; c < model.n_classes(); ++c) {
          const bool pos = std::find(truth.begin(), truth.end(), static_cast<int>(c)) != truth.end();
          correct += ((img_pred->positives(i, c) != 0) == pos) ? 1.0 : 0.0;
          total += 1.0;
        }
      } else {
        correct += detail::hit(*img_pred, i, label_of(*images, i)) ? 1.0 : 0.0;
        total += 1.0;
      }
    }
    report.global_error = 1.0 - correct / total;
  }

  std::vector<std::string> missing;
  std::mutex missing_mu;
  parallel_for(slices.size(), opts.threads, [&](std::size_t k) {
    const Slice& s = slices[k];
    SliceRow& row = report.rows[k];
    row.slice = s;
    const PromptSet prompts = slice_prompts(schema, s.assignment, templates, opts.ensemble, opts.generate, opts.unassigned);
    require(!prompts.empty(), "slice '" + s.name + "' generated no prompts");
    Matrix x;
    try {
      x = embed_prompts(prompts, embed);
    } catch (const DataError& e) {
      std::lock_guard lock(missing_mu);
      missing.push_back(e.what());
      return;
    }
    const Prediction p = predict(model, x, Modality::text);
    double prob = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto label = schema.label_of(prompts[i].assignment);
      require(label.has_value(), "prompt without a class label: " + prompts[i].text);
      prob += p.scores(static_cast<Eigen::Index>(i), *label);
      acc += detail::hit(p, static_cast<Eigen::Index>(i), *label) ? 1.0 : 0.0;
    }
    row.n_text_prompts = prompts.size();
    row.proxy_score = prob / static_cast<double>(prompts.size());
    row.text_accuracy = acc / static_cast<double>(prompts.size());

    if (images) {
      const auto rows = matching_rows(*images, schema, s.assignment);
      if (!rows.empty()) {
        const auto fixed_label = schema.label_of(s.assignment);
        double c = 0.0;
        for (auto i : rows) {
          int label = 0;
          if (fixed_label) {
            label = *fixed_label;
          } else if (!images->meta.multilabel()) {
            label = label_of(*images, i);
          } else {
            throw DataError("multi-label image slices must fix the class family");
          }
          c += detail::hit(*img_pred, i, label) ? 1.0 : 0.0;
        }
        row.image_n = rows.size();
        row.image_accuracy = c / static_cast<double>(rows.size());
      }
    }
  });
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string msg;
    for (const auto& m : missing) msg += m + "\n";
    throw DataError(msg);
  }
  report.global_proxy = detail::mean_proxy(report.rows);
  detail::sort_rows(report.rows);
  return report;
}

struct DiscoverOptions {
  std::size_t top_k = 10;
  double threshold_delta = 0.10;
  bool merge = false;
  double merge_epsilon = 0.02;
};

struct RankedSlice {
  SliceRow row;
  bool error = false;
};

/// Ranks slices by ascending proxy score; flags error slices whose score is at
/// least `threshold_delta` below the global mean; optionally prunes finer slices
/// that score within `merge_epsilon` of a coarser slice they refine.
inline std::vector<RankedSlice> discover(const SliceReport& report, const DiscoverOptions& opts) {
  std::vector<SliceRow> rows = report.rows;
  const double global = detail::mean_proxy(rows);
  detail::sort_rows(rows);
  auto is_refinement = [](const Assignment& coarse, const Assignment& fine) {
    if (coarse.size() >= fine.size()) return false;
    for (const auto& [f, v] : coarse) {
      auto it = fine.find(f);
      if (it == fine.end() || it->second != v) return false;
    }
    return true;
  };
  std::vector<RankedSlice> out;
  for (const auto& r : rows) {
    if (opts.merge) {
      const bool pruned = std::any_of(rows.begin(), rows.end(), [&](const SliceRow& q) {
        return is_refinement(q.slice.assignment, r.slice.assignment) &&
               std::abs(q.proxy_score - r.proxy_score) <= opts.merge_epsilon;
      });
      if (pruned) continue;
    }
    out.push_back({r, r.proxy_score <= global - opts.threshold_delta});
  }
  if (opts.top_k > 0 && out.size() > opts.top_k) out.resize(opts.top_k);
  return out;
}

// ---- Shapley values -----------------------------------------------------------

using CoalitionFn = std::function<double(std::uint32_t)>;

/// Memoized characteristic function over player bitmasks.
class Game {
 public:
  Game(std::size_t players, CoalitionFn fn) : players_(players), fn_(std::move(fn)) {
    require(players_ >= 1 && players_ < 31, "player count must be in [1, 30]");
  }

  std::size_t players() const { return players_; }

  double value(std::uint32_t mask) const {
    {
      std::lock_guard lock(mu_);
      auto it = memo_.find(mask);
      if (it != memo_.end()) return it->second;
    }
    const double v = fn_(mask);
    std::lock_guard lock(mu_);
    memo_.emplace(mask, v);  // identical keys insert identical values
    return v;
  }

  std::size_t evaluations() const {
    std::lock_guard lock(mu_);
    return memo_.size();
  }

 private:
  std::size_t players_;
  CoalitionFn fn_;
  mutable std::mutex mu_;
  mutable std::unordered_map<std::uint32_t, double> memo_;
};

/// Exact Shapley value: sum over coalitions F not containing `player` of
/// |F|!(n-|F|-1)!/n! * (v(F u {player}) - v(F)).
inline double shapley_exact(const Game& game, std::size_t player) {
  const std::size_t n = game.players();
  require(player < n, "player index out of range");
  std::vector<double> fact(n + 1, 1.0);
  for (std::size_t k = 1; k <= n; ++k) fact[k] = fact[k - 1] * static_cast<double>(k);
  const std::uint32_t bit = 1u << player;
  double total = 0.0;
  for (std::uint32_t m = 0; m < (1u << n); ++m) {
    if (m & bit) continue;
    const auto size = static_cast<std::size_t>(std::popcount(m));
    const double w = fact[size] * fact[n - size - 1] / fact[n];
    total += w * (game.value(m | bit) - game.value(m));
  }
  return total;
}

/// Average marginal contribution over every ordering of the players.
inline double shapley_all_permutations(const Game& game, std::size_t player) {
  const std::size_t n = game.players();
  require(n <= 10, "permutation enumeration limited to 10 players");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double total = 0.0;
  std::size_t count = 0;
  do {
    std::uint32_t before = 0;
    for (std::size_t p : perm) {
      if (p == player) break;
      before |= 1u << p;
    }
    total += game.value(before | (1u << player)) - game.value(before);
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return total / static_cast<double>(count);
}

struct McEstimate {
  double value = 0.0;
  double stderr_ = 0.0;
};

/// Mean marginal contribution over seeded uniform random orderings, with the
/// standard error of that mean.
inline McEstimate shapley_monte_carlo(const Game& game, std::size_t player, std::size_t permutations, std::uint64_t seed) {
  require(permutations >= 1, "permutations must be >= 1");
  const std::size_t n = game.players();
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(n);
  std::vector<double> contrib;
  contrib.reserve(permutations);
  for (std::size_t k = 0; k < permutations; ++k) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::uint32_t before = 0;
    for (std::size_t p : perm) {
      if (p == player) break;
      before |= 1u << p;
    }
    contrib.push_back(game.value(before | (1u << player)) - game.value(before));
  }
  double mean = 0.0;
  for (double c : contrib) mean += c;
  mean /= static_cast<double>(permutations);
  McEstimate e{mean, 0.0};
  if (permutations >= 2) {
    double sq = 0.0;
    for (double c : contrib) sq += (c - mean) * (c - mean);
    e.stderr_ = std::sqrt(sq / static_cast<double>(permutations - 1) / static_cast<double>(permutations));
  }
  return e;
}

/// What a player contributes when present: a fixed token, or all of its values.
struct PresenceRule {
  std::string family;
  std::optional<std::string> token;
};

/// Everything needed to turn coalitions into prompts and prompts into p_c.
struct AttributionContext {
  const ProbeModel* model = nullptr;
  const AttributeSchema* schema = nullptr;
  std::vector<Template> templates;
  std::vector<EnsembleTemplate> ensemble;
  GenerateOptions generate;
  TextEmbedFn embed;
};

/// Mean predicted probability of `label` over the prompts with `fixed` families
/// fixed and `marginalized` families marginalized; all others absent.
inline double class_probability(const AttributionContext& ctx, int label, const Assignment& fixed,
                                const std::vector<std::string>& marginalized) {
  const PromptSet prompts = generate(*ctx.schema, fixed, marginalized, ctx.templates, ctx.ensemble, ctx.generate);
  require(!prompts.empty(), "coalition generated no prompts");
  const Prediction p = predict(*ctx.model, embed_prompts(prompts, ctx.embed), Modality::text);
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) s += p.scores(i, label);
  return s / static_cast<double>(p.rows());
}

/// Game over `rules` (one player per non-class family): v(F) is p_c with the
/// class family marginalized and each present player applied per its rule.
inline Game prompt_game(const AttributionContext& ctx, int label, std::vector<PresenceRule> rules) {
  for (const auto& r : rules) {
    require(r.family != ctx.schema->class_family, "the class family cannot be a player");
    if (r.token && !ctx.schema->has_value(r.family, *r.token))
      throw DataError("token '" + *r.token + "' is not a value of '" + r.family + "'");
  }
  const std::size_t n = rules.size();
  return Game(n, [ctx, label, rules = std::move(rules)](std::uint32_t mask) {
    Assignment fixed;
    std::vector<std::string> marg{ctx.schema->class_family};
    for (std::size_t k = 0; k < rules.size(); ++k) {
      if (!((mask >> k) & 1u)) continue;
      if (rules[k].token) {
        fixed[rules[k].family] = *rules[k].token;
      } else {
        marg.push_back(rules[k].family);
      }
    }
    return class_probability(ctx, label, fixed, marg);
  });
}

inline constexpr std::size_t kExactPlayerCap = 12;

/// Players are the non-class families in schema order; the analyzed family is
/// fixed to `token` when present, every other present family is marginalized.
inline std::vector<PresenceRule> influence_rules(const AttributeSchema& schema, const std::string& family,
                                                 const std::string& token, std::size_t* player) {
  if (family == schema.class_family) throw ConfigError("cannot attribute the class family itself");
  if (!schema.has_value(family, token)) throw DataError("token '" + token + "' is not a value of '" + family + "'");
  std::vector<PresenceRule> rules;
  for (const auto& f : schema.non_class_families()) {
    if (f == family) {
      *player = rules.size();
      rules.push_back({f, token});
    } else {
      rules.push_back({f, std::nullopt});
    }
  }
  return rules;
}

inline double shapley_influence_exact(const AttributionContext& ctx, int label, const std::string& family,
                                      const std::string& token, std::size_t cap = kExactPlayerCap) {
  std::size_t player = 0;
  auto rules = influence_rules(*ctx.schema, family, token, &player);
  if (rules.size() > cap)
    throw ConfigError(std::to_string(rules.size()) + " players exceed the exact-mode cap of " + std::to_string(cap) +
                      "; use Monte-Carlo mode");
  return shapley_exact(prompt_game(ctx, label, std::move(rules)), player);
}

inline McEstimate shapley_influence_mc(const AttributionContext& ctx, int label, const std::string& family,
                                       const std::string& token, std::size_t permutations, std::uint64_t seed) {
  std::size_t player = 0;
  auto rules = influence_rules(*ctx.schema, family, token, &player);
  return shapley_monte_carlo(prompt_game(ctx, label, std::move(rules)), player, permutations, seed);
}

struct InfluenceEntry {
  std::string family;
  std::string token;
  double influence = 0.0;
  std::optional<double> stderr_;
  bool influential = false;
};

struct InfluenceOptions {
  bool exact = true;
  std::size_t exact_cap = kExactPlayerCap;
  std::size_t permutations = 1000;
  std::uint64_t seed = 0;
  double threshold = 0.05;  // |s_c(a)| at or above this marks an influential attribute
};

struct InfluenceReport {
  std::string class_name;
  std::string method;  // "exact" or "monte_carlo"
  std::size_t permutations = 0;
  std::uint64_t seed = 0;
  double threshold = 0.0;
  std::vector<InfluenceEntry> entries;  // schema order, then value order
};

/// Influence of every token of every non-class family on `class_name`.
inline InfluenceReport influence_report(const AttributionContext& ctx_in, const std::string& class_name,
                                        const InfluenceOptions& opts) {
  const auto& schema = *ctx_in.schema;
  auto it = schema.class_value_to_label.find(class_name);
  if (it == schema.class_value_to_label.end()) throw ConfigError("unknown class '" + class_name + "'");
  const int label = it->second;
  AttributionContext ctx = ctx_in;
  const ProbeModel model = with_text_mean(*ctx_in.model, schema, ctx.templates, ctx.ensemble, ctx.generate, ctx.embed);
  ctx.model = &model;
  // Prompts recur across coalitions and tokens; embed each once.
  auto cache = std::make_shared<std::unordered_map<std::string, Vector>>();
  auto cache_mu = std::make_shared<std::mutex>();
  ctx.embed = [inner = ctx_in.embed, cache, cache_mu](const Prompt& p) {
    {
      std::lock_guard lock(*cache_mu);
      auto f = cache->find(p.text);
      if (f != cache->end()) return f->second;
    }
    Vector v = inner(p);
    std::lock_guard lock(*cache_mu);
    cache->emplace(p.text, v);
    return v;
  };

  InfluenceReport r;
  r.class_name = class_name;
  r.method = opts.exact ? "exact" : "monte_carlo";
  r.permutations = opts.exact ? 0 : opts.permutations;
  r.seed = opts.seed;
  r.threshold = opts.threshold;
  for (const auto& fam : schema.non_class_families()) {
    for (const auto& token : schema.family(fam).values) {
      InfluenceEntry e{fam, token, 0.0, std::nullopt, false};
      if (opts.exact) {
        e.influence = shapley_influence_exact(ctx, label, fam, token, opts.exact_cap);
      } else {
        const auto est = shapley_influence_mc(ctx, label, fam, token, opts.permutations,
                                              mix_seed(opts.seed, fnv1a(fam + "=" + token)));
        e.influence = est.value;
        e.stderr_ = est.stderr_;
      }
      e.influential = std::abs(e.influence) >= opts.threshold;
      r.entries.push_back(std::move(e));
    }
  }
  return r;
}

// ---- correlation --------------------------------------------------------------

/// Ranks starting at 1; tied values share their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation; nullopt when either input is constant.
inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && !a.empty(), "pearson: length mismatch");
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

struct CorrelationReport {
  std::optional<double> spearman;
  std::optional<double> pearson;
  std::size_t n_slices = 0;
  std::vector<std::string> names;
  std::vector<double> text_scores;
  std::vector<double> image_scores;
};

inline CorrelationReport correlate(const std::vector<double>& text_scores, const std::vector<double>& image_scores,
                                   std::vector<std::string> names = {}) {
  require(text_scores.size() == image_scores.size(), "correlate: score vectors differ in length");
  require(text_scores.size() >= 3, "correlate: need at least 3 slices");
  CorrelationReport r;
  r.spearman = xdiag::spearman(text_scores, image_scores);
  r.pearson = xdiag::pearson(text_scores, image_scores);
  r.n_slices = text_scores.size();
  r.names = std::move(names);
  r.text_scores = text_scores;
  r.image_scores = image_scores;
  return r;
}

/// Pairs each slice's text proxy with its image accuracy, skipping slices
/// without image rows.
inline CorrelationReport correlate(const SliceReport& report) {
  std::vector<double> t, im;
  std::vector<std::string> names;
  for (const auto& row : report.rows) {
    if (!row.image_accuracy) continue;
    t.push_back(row.proxy_score);
    im.push_back(*row.image_accuracy);
    names.push_back(row.slice.name);
  }
  return correlate(t, im, std::move(names));
}

// ---- serialization ------------------------------------------------------------

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const SliceRow& r) {
  return {{"name", r.slice.name},
          {"assignment", r.slice.assignment},
          {"n_text_prompts", r.n_text_prompts},
          {"proxy_score", r.proxy_score},
          {"text_accuracy", r.text_accuracy},
          {"image_n", r.image_n ? nlohmann::json(*r.image_n) : nlohmann::json(nullptr)},
          {"image_accuracy", opt_json(r.image_accuracy)}};
}

inline nlohmann::json to_json(const SliceReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"rows", rows}, {"global_proxy", r.global_proxy}, {"global_error", opt_json(r.global_error)}};
}

inline nlohmann::json to_json(const std::vector<RankedSlice>& ranked) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    nlohmann::json j = to_json(ranked[k].row);
    j["rank"] = k + 1;
    j["error"] = ranked[k].error;
    out.push_back(std::move(j));
  }
  return out;
}

inline SliceRow slice_row_from_json(const AttributeSchema* schema, const nlohmann::json& j) {
  SliceRow r;
  r.slice.assignment = j.at("assignment").get<Assignment>();
  r.slice.name = schema ? make_slice(*schema, r.slice.assignment).name : j.value("name", std::string());
  r.n_text_prompts = j.value("n_text_prompts", std::size_t{0});
  r.proxy_score = j.value("proxy_score", 0.0);
  r.text_accuracy = j.value("text_accuracy", 0.0);
  if (j.contains("image_n") && !j["image_n"].is_null()) r.image_n = j["image_n"].get<std::size_t>();
  if (j.contains("image_accuracy") && !j["image_accuracy"].is_null()) r.image_accuracy = j["image_accuracy"].get<double>();
  return r;
}

inline SliceReport slice_report_from_json(const nlohmann::json& j) {
  SliceReport r;
  try {
    for (const auto& row : j.at("rows")) r.rows.push_back(slice_row_from_json(nullptr, row));
    r.global_proxy = j.value("global_proxy", 0.0);
    if (j.contains("global_error") && !j["global_error"].is_null()) r.global_error = j["global_error"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid slice report: ") + e.what());
  }
  return r;
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_num(const std::optional<double>& v) {
  if (!v) return "";
  return format_double(*v);
}

}  // namespace detail

inline std::string to_csv(const SliceReport& r) {
  std::ostringstream os;
  os << "slice,n_text_prompts,proxy_score,text_accuracy,image_n,image_accuracy\n";
  for (const auto& row : r.rows) {
    os << detail::csv_escape(row.slice.name) << ',' << row.n_text_prompts << ',' << detail::csv_num(row.proxy_score) << ','
       << detail::csv_num(row.text_accuracy) << ',' << (row.image_n ? std::to_string(*row.image_n) : "") << ','
       << detail::csv_num(row.image_accuracy) << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const InfluenceReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"family", e.family},
                       {"token", e.token},
                       {"influence", e.influence},
                       {"stderr", opt_json(e.stderr_)},
                       {"influential", e.influential}});
  nlohmann::json method = r.method == "exact" ? nlohmann::json("exact")
                                              : nlohmann::json({{"monte_carlo", {{"permutations", r.permutations}, {"seed", r.seed}}}});
  return {{"class", r.class_name}, {"method", method}, {"threshold", r.threshold}, {"entries", entries}};
}

inline std::string to_csv(const InfluenceReport& r) {
  std::ostringstream os;
  os << "class,family,token,influence,stderr,influential\n";
  for (const auto& e : r.entries)
    os << detail::csv_escape(r.class_name) << ',' << detail::csv_escape(e.family) << ',' << detail::csv_escape(e.token) << ','
       << detail::csv_num(e.influence) << ',' << detail::csv_num(e.stderr_) << ',' << (e.influential ? 1 : 0) << '\n';
  return os.str();
}

inline nlohmann::json to_json(const CorrelationReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t k = 0; k < r.text_scores.size(); ++k) {
    nlohmann::json p = {{"text", r.text_scores[k]}, {"image", r.image_scores[k]}};
    if (k < r.names.size()) p["slice"] = r.names[k];
    pairs.push_back(std::move(p));
  }
  auto coef = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json("undefined"); };
  return {{"spearman", coef(r.spearman)}, {"pearson", coef(r.pearson)}, {"n_slices", r.n_slices}, {"pairs", pairs}};
}

inline std::string to_csv(const CorrelationReport& r) {
  std::ostringstream os;
  os << "slice,text,image\n";
  for (std::size_t k = 0; k < r.text_scores.size(); ++k)
    os << detail::csv_escape(k < r.names.size() ? r.names[k] : std::to_string(k)) << ','
       << detail::csv_num(r.text_scores[k]) << ',' << detail::csv_num(r.image_scores[k]) << '\n';
  return os.str();
}

}  // namespace xdiag
