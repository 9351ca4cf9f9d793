/**
 * Copyright (c) orepa contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Block-spec JSON (schemas/blockspec-1.json). Two forms:
//
//   {"preset": "orepa3x3", "in_ch": 4, "out_ch": 4, "k": 3, "seed": 7, "options": {...}}
//   {"in_ch": 2, "out_ch": 2, "branches": [[{"kind": "conv", "k": 3}], ...], ...}
//
// The branch form can carry explicit weights and scaling vectors, which is
// how checkpoints are written.

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "orepa/blocks.hpp"

namespace orepa {

inline constexpr const char* kToolVersion = "0.1.0";

using json = nlohmann::json;

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SpecHeader {
  std::size_t in_ch = 1, out_ch = 1, k = 3;
  DType dtype = DType::f64;
  std::uint64_t seed = 0;
  std::optional<PresetId> preset;
};

namespace spec_detail {

inline void only_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw SpecError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw SpecError(where + ": unknown key \"" + key + "\"");
}

template <class V>
V get_or(const json& j, const char* key, V fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw SpecError(where + ": bad value for \"" + key + "\"");
  }
}

inline std::size_t count(const json& j, const char* key, std::size_t fallback, const std::string& where,
                         bool required = false) {
  if (!j.contains(key)) {
    if (required) throw SpecError(where + ": missing \"" + key + "\"");
    return fallback;
  }
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 1) throw SpecError(where + ": \"" + key + "\" must be an integer >= 1");
  return v.get<std::size_t>();
}

inline Stride stride_of(const json& j, const std::string& where) {
  if (!j.contains("stride")) return {};
  const auto& s = j.at("stride");
  if (s.is_number_integer() && s.get<long long>() >= 1) return {s.get<std::size_t>(), s.get<std::size_t>()};
  if (s.is_array() && s.size() == 2 && s[0].is_number_integer() && s[1].is_number_integer() && s[0].get<long long>() >= 1 &&
      s[1].get<long long>() >= 1)
    return {s[0].get<std::size_t>(), s[1].get<std::size_t>()};
  throw SpecError(where + ": \"stride\" must be an integer or [h, w] with entries >= 1");
}

inline PresetOptions options_of(const json& j) {
  const std::string where = "options";
  only_keys(j, {"internal_width", "dw_expansion", "frozen_scaling", "theta", "symmetric_init", "scaling", "stride"},
            where);
  PresetOptions o;
  if (j.contains("internal_width")) o.internal_width = count(j, "internal_width", 1, where);
  o.dw_expansion = j.contains("dw_expansion") ? count(j, "dw_expansion", 1, where) : 0;
  o.frozen_scaling = get_or<bool>(j, "frozen_scaling", false, where);
  o.theta = get_or<double>(j, "theta", o.theta, where);
  if (!(o.theta > 0)) throw SpecError(where + ": theta must be > 0");
  o.symmetric_init = get_or<bool>(j, "symmetric_init", false, where);
  if (j.contains("scaling")) {
    const auto& s = j.at("scaling");
    if (!s.is_object()) throw SpecError(where + ": \"scaling\" must map branch kinds to numbers");
    for (const auto& [name, v] : s.items()) {
      const auto kind = parse_branch_kind(name);
      if (!kind) throw SpecError(where + ": unknown branch kind \"" + name + "\"");
      if (!v.is_number()) throw SpecError(where + ": scaling for \"" + name + "\" must be a number");
      o.scaling_overrides[*kind] = v.get<double>();
    }
  }
  o.stride = stride_of(j, where);
  return o;
}

inline json options_to_json(const PresetOptions& o) {
  json j = json::object();
  if (o.internal_width) j["internal_width"] = *o.internal_width;
  if (o.dw_expansion) j["dw_expansion"] = o.dw_expansion;
  if (o.frozen_scaling) j["frozen_scaling"] = true;
  if (o.theta != PresetOptions{}.theta) j["theta"] = o.theta;
  if (o.symmetric_init) j["symmetric_init"] = true;
  if (!o.scaling_overrides.empty()) {
    json s = json::object();
    for (const auto& [k, v] : o.scaling_overrides) s[branch_kind_name(k)] = v;
    j["scaling"] = s;
  }
  if (o.stride != Stride{}) j["stride"] = {o.stride.h, o.stride.w};
  return j;
}

template <Scalar T>
Layer<T> layer_of(const json& j, std::size_t in, std::size_t block_out, std::size_t k_default, bool last,
                  std::uint64_t seed, const std::string& where, bool& norm_after) {
  only_keys(j, {"kind", "k", "groups", "out_ch", "expansion", "trainable", "theta", "symmetric", "value", "weights",
                "norm_after"},
            where);
  if (!j.contains("kind") || !j.at("kind").is_string()) throw SpecError(where + ": missing \"kind\"");
  const std::string kind = j.at("kind").get<std::string>();
  const std::size_t k = count(j, "k", k_default, where);
  LayerKind lk;
  std::size_t out = 0;
  if (kind == "conv") {
    lk = ConvLayer{k, count(j, "groups", 1, where)};
  } else if (kind == "identity1x1") {
    lk = IdentityConv1x1{};
  } else if (kind == "scaling") {
    lk = ScalingLayer{};
    out = in;
  } else if (kind == "avgpool") {
    lk = AvgPoolLayer{k};
    out = in;
  } else if (kind == "freqfilter") {
    lk = FreqFilterLayer{k};
    out = in;
  } else if (kind == "dwconv") {
    const std::size_t e = count(j, "expansion", 1, where);
    lk = DepthwiseConvLayer{k, e};
    out = in * e;
  } else if (kind == "pwconv") {
    lk = PointwiseConvLayer{};
  } else {
    throw SpecError(where + ": unknown layer kind \"" + kind + "\"");
  }
  if (j.contains("out_ch")) out = count(j, "out_ch", 1, where);
  if (out == 0) out = last ? block_out : in;

  LayerSpec s = LayerSpec::make(lk, in, out);
  s.trainable = get_or<bool>(j, "trainable", s.trainable, where);
  if (std::holds_alternative<UniformKaiming>(s.init))
    s.init = UniformKaiming{get_or<double>(j, "theta", std::numbers::sqrt3, where), get_or<bool>(j, "symmetric", false, where)};
  if (std::holds_alternative<ConstantVector>(s.init)) s.init = ConstantVector{get_or<double>(j, "value", 1.0, where)};
  norm_after = get_or<bool>(j, "norm_after", false, where);

  KernelTensor<T> w;
  try {
    w = materialize<T>(s, seed);
  } catch (const LayerError& e) {
    throw SpecError(where + ": " + e.what());
  }
  if (j.contains("weights")) {
    const auto& a = j.at("weights");
    if (!a.is_array() || a.size() != w.size())
      throw SpecError(where + ": \"weights\" must hold " + std::to_string(w.size()) + " numbers");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_number()) throw SpecError(where + ": non-numeric weight");
      w.data()[i] = a[i].get<T>();
    }
  }
  return {s, std::move(w)};
}

inline json layer_to_json(const LayerSpec& s) {
  json j;
  j["kind"] = kind_name(s.kind);
  std::visit(
      [&](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ConvLayer>) {
          j["k"] = v.k;
          j["groups"] = v.groups;
        } else if constexpr (std::is_same_v<V, AvgPoolLayer> || std::is_same_v<V, FreqFilterLayer>) {
          j["k"] = v.k;
        } else if constexpr (std::is_same_v<V, DepthwiseConvLayer>) {
          j["k"] = v.k;
          j["expansion"] = v.expansion;
        }
      },
      s.kind);
  j["out_ch"] = s.out_ch;
  j["trainable"] = s.trainable;
  if (const auto* u = std::get_if<UniformKaiming>(&s.init)) {
    j["theta"] = u->theta;
    j["symmetric"] = u->symmetric;
  }
  if (const auto* c = std::get_if<ConstantVector>(&s.init)) j["value"] = c->m;
  return j;
}

}  // namespace spec_detail

inline json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SpecError(origin + ": " + e.what());
  }
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SpecError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_text(ss.str(), path);
}

inline SpecHeader read_header(const json& j) {
  using namespace spec_detail;
  only_keys(j,
            {"in_ch", "out_ch", "k", "dtype", "seed", "preset", "options", "branches", "scaling_init", "scaling",
             "scaling_trainable", "branch_kinds", "merge_groups", "post_add_norm", "stride"},
            "spec");
  SpecHeader h;
  h.in_ch = count(j, "in_ch", 1, "spec", true);
  h.out_ch = count(j, "out_ch", 1, "spec", true);
  const std::string dt = get_or<std::string>(j, "dtype", "f64", "spec");
  if (dt == "f32")
    h.dtype = DType::f32;
  else if (dt == "f64")
    h.dtype = DType::f64;
  else
    throw SpecError("spec: dtype must be \"f32\" or \"f64\"");
  if (j.contains("seed") && !(j.at("seed").is_number_unsigned() || (j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0)))
    throw SpecError("spec: seed must be a non-negative integer");
  h.seed = get_or<std::uint64_t>(j, "seed", 0, "spec");
  const bool has_preset = j.contains("preset"), has_branches = j.contains("branches");
  if (has_preset == has_branches) throw SpecError("spec: exactly one of \"preset\" and \"branches\" is required");
  if (has_preset) {
    const auto name = get_or<std::string>(j, "preset", "", "spec");
    h.preset = parse_preset(name);
    if (!h.preset) throw SpecError("spec: unknown preset \"" + name + "\"");
    for (const char* key : {"scaling_init", "scaling", "scaling_trainable", "branch_kinds", "merge_groups", "post_add_norm", "stride"})
      if (j.contains(key)) throw SpecError(std::string("spec: \"") + key + "\" is not allowed with a preset (use options)");
    h.k = count(j, "k", h.preset == PresetId::Orepa1x1 ? 1 : (h.preset == PresetId::DeepStem ? 7 : 3), "spec");
  } else {
    if (j.contains("options")) throw SpecError("spec: \"options\" requires a preset");
    h.k = count(j, "k", 3, "spec");
  }
  return h;
}

/// Build the block described by a spec document. Throws SpecError.
template <Scalar T>
BlockGraph<T> block_from_json(const json& j) {
  using namespace spec_detail;
  const SpecHeader h = read_header(j);
  if (h.preset) {
    const PresetOptions opt = j.contains("options") ? options_of(j.at("options")) : PresetOptions{};
    try {
      return build_preset<T>(*h.preset, h.in_ch, h.out_ch, h.k, h.seed, opt);
    } catch (const BlockError& e) {
      throw SpecError(e.what());
    } catch (const LayerError& e) {
      throw SpecError(e.what());
    }
  }

  const auto& brs = j.at("branches");
  if (!brs.is_array() || brs.empty()) throw SpecError("spec: \"branches\" must be a non-empty array");
  const std::size_t n = brs.size();
  auto per_branch = [&](const char* key) -> const json* {
    if (!j.contains(key)) return nullptr;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != n)
      throw SpecError(std::string("spec: \"") + key + "\" must have one entry per branch");
    return &a;
  };
  const json* sinit = per_branch("scaling_init");
  const json* sexp = per_branch("scaling");
  const json* kinds = per_branch("branch_kinds");
  const json* groups = per_branch("merge_groups");

  BlockGraph<T> b;
  b.in_ch = h.in_ch;
  b.out_ch = h.out_ch;
  b.post_add_norm = get_or<bool>(j, "post_add_norm", false, "spec");
  b.stride = stride_of(j, "spec");
  // scaling_trainable: one flag for every branch, or one entry (bool or null) per branch.
  const json* strain_each = nullptr;
  bool strain = true;
  if (j.contains("scaling_trainable") && j.at("scaling_trainable").is_array())
    strain_each = per_branch("scaling_trainable");
  else
    strain = get_or<bool>(j, "scaling_trainable", true, "spec");

  for (std::size_t i = 0; i < n; ++i) {
    const std::string where = "branch " + std::to_string(i);
    const auto& layers = brs[i];
    if (!layers.is_array() || layers.empty()) throw SpecError(where + ": must be a non-empty array of layers");
    Branch<T> br;
    std::size_t c = h.in_ch;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      bool norm = false;
      auto layer = layer_of<T>(layers[l], c, h.out_ch, h.k, l + 1 == layers.size(), derive_seed(h.seed, i, l),
                               where + " layer " + std::to_string(l), norm);
      c = layer.spec.out_ch;
      br.layers.push_back(std::move(layer));
      if (norm) br.norm_after.push_back(l);
    }
    if (kinds) {
      if (!(*kinds)[i].is_string()) throw SpecError(where + ": branch kind must be a string");
      const auto kind = parse_branch_kind((*kinds)[i].get<std::string>());
      if (!kind) throw SpecError(where + ": unknown branch kind \"" + (*kinds)[i].get<std::string>() + "\"");
      br.kind = *kind;
    }
    if (groups) {
      if (!(*groups)[i].is_number_integer() || (*groups)[i].get<long long>() < 0)
        throw SpecError(where + ": merge group must be an integer >= 0");
      br.merge_group = (*groups)[i].get<std::size_t>();
    }
    if (sexp && !(*sexp)[i].is_null()) {
      const auto& v = (*sexp)[i];
      if (!v.is_array() || v.size() != h.out_ch) throw SpecError(where + ": scaling must hold out_ch numbers");
      std::vector<T> g;
      for (const auto& x : v) {
        if (!x.is_number()) throw SpecError(where + ": non-numeric scaling");
        g.push_back(x.get<T>());
      }
      br.scaling = std::move(g);
    } else if (sinit && !(*sinit)[i].is_null()) {
      if (!(*sinit)[i].is_number()) throw SpecError(where + ": scaling_init must be a number or null");
      br.scaling = std::vector<T>(h.out_ch, (*sinit)[i].get<T>());
    }
    br.scaling_trainable = strain;
    if (strain_each && !(*strain_each)[i].is_null()) {
      if (!(*strain_each)[i].is_boolean()) throw SpecError(where + ": scaling_trainable entries must be booleans or null");
      br.scaling_trainable = (*strain_each)[i].get<bool>();
    }
    if (!br.scaling) br.scaling_trainable = true;
    b.branches.push_back(std::move(br));
  }
  try {
    validate(b);
  } catch (const BlockError& e) {
    throw SpecError(e.what());
  }
  return b;
}

/// Branch-form document with explicit weights and scaling vectors.
template <Scalar T>
json block_to_json(const BlockGraph<T>& b, std::uint64_t seed) {
  using namespace spec_detail;
  json j;
  j["in_ch"] = b.in_ch;
  j["out_ch"] = b.out_ch;
  j["k"] = b.effective_extent();
  j["dtype"] = dtype_name(dtype_of<T>());
  j["seed"] = seed;
  json branches = json::array(), scaling = json::array(), kinds = json::array(), groups = json::array();
  json strain_each = json::array();
  bool all_trainable = true, all_frozen = true;
  for (const auto& br : b.branches) {
    json layers = json::array();
    for (std::size_t l = 0; l < br.layers.size(); ++l) {
      json lj = layer_to_json(br.layers[l].spec);
      const auto d = br.layers[l].weight.data();
      lj["weights"] = std::vector<T>(d.begin(), d.end());
      if (std::find(br.norm_after.begin(), br.norm_after.end(), l) != br.norm_after.end()) lj["norm_after"] = true;
      layers.push_back(std::move(lj));
    }
    branches.push_back(std::move(layers));
    scaling.push_back(br.scaling ? json(*br.scaling) : json(nullptr));
    kinds.push_back(branch_kind_name(br.kind));
    groups.push_back(br.merge_group);
    strain_each.push_back(br.scaling ? json(br.scaling_trainable) : json(nullptr));
    if (br.scaling) {
      all_trainable = all_trainable && br.scaling_trainable;
      all_frozen = all_frozen && !br.scaling_trainable;
    }
  }
  j["branches"] = std::move(branches);
  j["scaling"] = std::move(scaling);
  if (all_trainable || all_frozen)
    j["scaling_trainable"] = all_trainable;
  else
    j["scaling_trainable"] = std::move(strain_each);
  j["branch_kinds"] = std::move(kinds);
  j["merge_groups"] = std::move(groups);
  j["post_add_norm"] = b.post_add_norm;
  if (b.stride != Stride{}) j["stride"] = {b.stride.h, b.stride.w};
  return j;
}

/// Fields every machine-readable report starts with.
inline json report_header(const std::string& command, std::uint64_t seed, DType dtype) {
  return json{{"tool_version", kToolVersion}, {"command", command}, {"seed", seed}, {"dtype", dtype_name(dtype)}};
}

}  // namespace orepa
