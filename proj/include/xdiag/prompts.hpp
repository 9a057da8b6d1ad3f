#pragma once

// Attribute schemas, a small template grammar, and prompt-set generation.
//
// Template grammar:
//   {name}            placeholder for attribute family `name`
//   [ ... {name} ...] optional block, emitted only when `name` is assigned;
//                     holds exactly one placeholder
//   \{ \} \[ \]       literal braces/brackets
// Everything else is literal text.

#include "xdiag/common.hpp"
#include "xdiag/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace xdiag {

using Assignment = std::map<std::string, std::string>;

struct Family {
  std::string name;
  std::vector<std::string> values;
};

struct AttributeSchema {
  std::vector<Family> families;
  std::string class_family;
  std::map<std::string, int> class_value_to_label;

  const Family& family(const std::string& name) const {
    for (const auto& f : families)
      if (f.name == name) return f;
    throw ConfigError("unknown attribute family '" + name + "'");
  }

  bool has_family(const std::string& name) const {
    return std::any_of(families.begin(), families.end(), [&](const Family& f) { return f.name == name; });
  }

  std::size_t family_index(const std::string& name) const {
    for (std::size_t k = 0; k < families.size(); ++k)
      if (families[k].name == name) return k;
    throw ConfigError("unknown attribute family '" + name + "'");
  }

  bool has_value(const std::string& fam, const std::string& value) const {
    const auto& v = family(fam).values;
    return std::find(v.begin(), v.end(), value) != v.end();
  }

  /// Class display names in label order.
  std::vector<std::string> class_names() const {
    std::vector<std::string> names(class_value_to_label.size());
    for (const auto& [value, label] : class_value_to_label) names[static_cast<std::size_t>(label)] = value;
    return names;
  }

  std::optional<int> label_of(const Assignment& a) const {
    auto it = a.find(class_family);
    if (it == a.end()) return std::nullopt;
    auto lt = class_value_to_label.find(it->second);
    if (lt == class_value_to_label.end()) return std::nullopt;
    return lt->second;
  }

  /// Families other than the class family, in schema order.
  std::vector<std::string> non_class_families() const {
    std::vector<std::string> out;
    for (const auto& f : families)
      if (f.name != class_family) out.push_back(f.name);
    return out;
  }

  void validate() const {
    std::set<std::string> names;
    for (const auto& f : families) {
      require(!f.name.empty(), "attribute family names must be non-empty");
      require(names.insert(f.name).second, "duplicate attribute family '" + f.name + "'");
      require(!f.values.empty(), "family '" + f.name + "' has no values");
      std::set<std::string> vals;
      for (const auto& v : f.values) {
        require(!v.empty(), "family '" + f.name + "' has an empty value");
        require(vals.insert(v).second, "family '" + f.name + "' repeats value '" + v + "'");
      }
    }
    require(names.count(class_family) == 1, "class family '" + class_family + "' is not in the schema");
    std::vector<bool> covered(class_value_to_label.size(), false);
    for (const auto& [value, label] : class_value_to_label) {
      require(has_value(class_family, value), "class value '" + value + "' is not a value of '" + class_family + "'");
      require(label >= 0 && static_cast<std::size_t>(label) < covered.size(), "class label out of range");
      covered[static_cast<std::size_t>(label)] = true;
    }
    require(!covered.empty(), "schema defines no classes");
    for (bool c : covered) require(c, "class labels must cover 0..|classes|-1");
  }
};

/// Builds a schema whose classes are `class_values` in order.
inline AttributeSchema make_schema(std::vector<Family> families, std::string class_family,
                                   const std::vector<std::string>& class_values) {
  AttributeSchema s{std::move(families), std::move(class_family), {}};
  for (std::size_t k = 0; k < class_values.size(); ++k) s.class_value_to_label[class_values[k]] = static_cast<int>(k);
  s.validate();
  return s;
}

inline AttributeSchema schema_from_json(const nlohmann::json& j) {
  try {
    std::vector<Family> fams;
    for (const auto& fj : j.at("families"))
      fams.push_back({fj.at("name").get<std::string>(), fj.at("values").get<std::vector<std::string>>()});
    const auto class_family = j.at("class_family").get<std::string>();
    std::vector<std::string> class_values;
    if (j.contains("class_values") && !j["class_values"].is_null()) {
      class_values = j["class_values"].get<std::vector<std::string>>();
    } else {
      for (const auto& f : fams)
        if (f.name == class_family) class_values = f.values;
    }
    return make_schema(std::move(fams), class_family, class_values);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid schema: ") + e.what());
  }
}

inline nlohmann::json to_json(const AttributeSchema& s) {
  nlohmann::json fams = nlohmann::json::array();
  for (const auto& f : s.families) fams.push_back({{"name", f.name}, {"values", f.values}});
  return {{"families", fams}, {"class_family", s.class_family}, {"class_values", s.class_names()}};
}

// ---- templates ----------------------------------------------------------------

struct Literal {
  std::string text;
  bool operator==(const Literal&) const = default;
};
struct Placeholder {
  std::string family;
  bool operator==(const Placeholder&) const = default;
};
struct OptionalBlock {
  std::string prefix;
  std::string family;
  std::string suffix;
  bool operator==(const OptionalBlock&) const = default;
};
using Segment = std::variant<Literal, Placeholder, OptionalBlock>;

struct Template {
  std::vector<Segment> segments;
  std::string source;

  std::vector<std::string> families() const {
    std::vector<std::string> out;
    for (const auto& s : segments) {
      if (auto* p = std::get_if<Placeholder>(&s)) out.push_back(p->family);
      if (auto* b = std::get_if<OptionalBlock>(&s)) out.push_back(b->family);
    }
    return out;
  }

  std::vector<std::string> mandatory_families() const {
    std::vector<std::string> out;
    for (const auto& s : segments)
      if (auto* p = std::get_if<Placeholder>(&s)) out.push_back(p->family);
    return out;
  }
};

inline Template parse_template(const std::string& source) {
  Template t;
  t.source = source;
  std::string buf;
  bool in_block = false;
  std::optional<std::string> block_family;
  std::string block_prefix;
  std::set<std::string> seen;

  auto fail = [&](const std::string& why) -> void { throw DataError("template \"" + source + "\": " + why); };
  auto flush = [&] {
    if (!buf.empty()) t.segments.push_back(Literal{buf});
    buf.clear();
  };

  for (std::size_t i = 0; i < source.size(); ++i) {
    const char ch = source[i];
    if (ch == '\\') {
      if (i + 1 >= source.size()) fail("dangling escape at end");
      const char nx = source[++i];
      if (nx != '{' && nx != '}' && nx != '[' && nx != ']') fail(std::string("unknown escape '\\") + nx + "'");
      buf.push_back(nx);
    } else if (ch == '{') {
      const auto close = source.find('}', i + 1);
      if (close == std::string::npos) fail("unbalanced '{'");
      std::string name = source.substr(i + 1, close - i - 1);
      if (name.empty()) fail("empty placeholder");
      if (name.find_first_of("{[]\\") != std::string::npos) fail("unbalanced brackets in placeholder");
      if (!seen.insert(name).second) fail("duplicate family '" + name + "'");
      if (in_block) {
        if (block_family) fail("optional block with more than one placeholder");
        block_family = name;
        block_prefix = buf;
        buf.clear();
      } else {
        flush();
        t.segments.push_back(Placeholder{name});
      }
      i = close;
    } else if (ch == '}') {
      fail("unbalanced '}'");
    } else if (ch == '[') {
      if (in_block) fail("nested optional blocks are not allowed");
      flush();
      in_block = true;
      block_family.reset();
    } else if (ch == ']') {
      if (!in_block) fail("unbalanced ']'");
      if (!block_family) fail("optional block without a placeholder");
      t.segments.push_back(OptionalBlock{block_prefix, *block_family, buf});
      buf.clear();
      in_block = false;
    } else {
      buf.push_back(ch);
    }
  }
  if (in_block) fail("unbalanced '['");
  flush();
  return t;
}

inline std::string render(const Template& t, const Assignment& a) {
  std::string out;
  for (const auto& s : t.segments) {
    if (auto* l = std::get_if<Literal>(&s)) {
      out += l->text;
    } else if (auto* p = std::get_if<Placeholder>(&s)) {
      auto it = a.find(p->family);
      if (it == a.end()) throw DataError("missing mandatory family '" + p->family + "' in template \"" + t.source + "\"");
      out += it->second;
    } else {
      const auto& b = std::get<OptionalBlock>(s);
      auto it = a.find(b.family);
      if (it != a.end()) out += b.prefix + it->second + b.suffix;
    }
  }
  return out;
}

/// Outer template wrapping a rendered core sentence at its single "{c}".
struct EnsembleTemplate {
  std::string prefix;
  std::string suffix;
  std::string source;

  std::string wrap(const std::string& core) const { return prefix + core + suffix; }
};

inline EnsembleTemplate parse_ensemble_template(const std::string& source) {
  const auto pos = source.find("{c}");
  if (pos == std::string::npos || source.find("{c}", pos + 1) != std::string::npos)
    throw DataError("ensemble template \"" + source + "\" must contain exactly one {c}");
  return {source.substr(0, pos), source.substr(pos + 3), source};
}

// ---- generation ---------------------------------------------------------------

struct Prompt {
  std::string text;
  Assignment assignment;
  std::size_t template_index = 0;
  int ensemble_index = -1;  // -1 when no ensemble is used
};

using PromptSet = std::vector<Prompt>;

struct GenerateOptions {
  std::size_t ensemble_cap = 0;  // 0 = use every outer template
};

/// Cross product of marginalized family values x templates x ensemble. Families
/// neither fixed nor marginalized are absent. Order: template index, then
/// marginalized values (first family in schema order varies slowest), then
/// ensemble index.
inline PromptSet generate(const AttributeSchema& schema, const Assignment& fixed,
                          const std::vector<std::string>& marginalized, const std::vector<Template>& templates,
                          const std::vector<EnsembleTemplate>& ensemble = {}, const GenerateOptions& opts = {}) {
  for (const auto& [fam, value] : fixed) {
    if (!schema.has_family(fam)) throw DataError("fixed family '" + fam + "' is not in the schema");
    if (!schema.has_value(fam, value)) throw DataError("fixed value '" + value + "' is not a value of '" + fam + "'");
  }
  std::set<std::string> marg_set;
  for (const auto& fam : marginalized) {
    if (!schema.has_family(fam)) throw DataError("marginalized family '" + fam + "' is not in the schema");
    if (fixed.count(fam)) throw DataError("family '" + fam + "' is both fixed and marginalized");
    require(marg_set.insert(fam).second, "family '" + fam + "' marginalized twice");
  }
  require(!templates.empty(), "no templates");
  std::vector<const Family*> fams;
  for (const auto& f : schema.families)
    if (marg_set.count(f.name)) fams.push_back(&f);

  std::size_t n_ens = ensemble.size();
  if (opts.ensemble_cap > 0) n_ens = std::min(n_ens, opts.ensemble_cap);

  PromptSet out;
  for (std::size_t t = 0; t < templates.size(); ++t) {
    std::vector<std::size_t> idx(fams.size(), 0);
    for (bool done = false; !done;) {
      Assignment a = fixed;
      for (std::size_t k = 0; k < fams.size(); ++k) a[fams[k]->name] = fams[k]->values[idx[k]];
      const std::string core = render(templates[t], a);
      if (n_ens == 0) {
        out.push_back({core, a, t, -1});
      } else {
        for (std::size_t e = 0; e < n_ens; ++e) out.push_back({ensemble[e].wrap(core), a, t, static_cast<int>(e)});
      }
      // odometer, last family fastest
      done = true;
      for (std::size_t k = fams.size(); k-- > 0;) {
        if (++idx[k] < fams[k]->values.size()) {
          done = false;
          break;
        }
        idx[k] = 0;
      }
    }
  }
  return out;
}

inline std::vector<Template> templates_from_json(const nlohmann::json& j) {
  require(j.is_array(), "template file must be a JSON array of strings");
  std::vector<Template> out;
  for (const auto& s : j) {
    require(s.is_string(), "template file must be a JSON array of strings");
    out.push_back(parse_template(s.get<std::string>()));
  }
  return out;
}

inline std::vector<EnsembleTemplate> ensemble_from_json(const nlohmann::json& j) {
  require(j.is_array(), "ensemble file must be a JSON array of strings");
  std::vector<EnsembleTemplate> out;
  for (const auto& s : j) {
    require(s.is_string(), "ensemble file must be a JSON array of strings");
    out.push_back(parse_ensemble_template(s.get<std::string>()));
  }
  return out;
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline AttributeSchema load_schema(const std::filesystem::path& p) { return schema_from_json(parse_json_file(p)); }
inline std::vector<Template> load_templates(const std::filesystem::path& p) { return templates_from_json(parse_json_file(p)); }
inline std::vector<EnsembleTemplate> load_ensemble(const std::filesystem::path& p) {
  return ensemble_from_json(parse_json_file(p));
}

}  // namespace xdiag
