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

// orepa: squeeze, verify and probe linear multi-branch conv blocks.
//
// Exit codes: 0 pass, 1 invariant violation, 2 usage/spec error,
// 3 merge/shape error.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "orepa/orepa.hpp"

namespace {

using namespace orepa;

enum Exit { kPass = 0, kViolation = 1, kUsage = 2, kMerge = 3 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string spec;
  std::string json_path;
};

void emit(const Common& c, const json& report) {
  if (c.json_path.empty()) return;
  std::ofstream out(c.json_path);
  if (!out) throw UsageError("cannot write " + c.json_path);
  out << report.dump(2) << '\n';
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::vector<std::size_t> shape_vec(std::span<const std::size_t> s) { return {s.begin(), s.end()}; }

template <Scalar T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return t;
}

// --- squeeze ---------------------------------------------------------------

struct SqueezeArgs {
  std::string out;
};

template <Scalar T>
int run_squeeze(const Common& c, const SqueezeArgs& a, const json& spec, const SpecHeader& h) {
  const auto block = block_from_json<T>(spec);
  const auto sq = squeeze_block(block);
  save_kernel(a.out, sq.kernel);
  std::ofstream trace(a.out + ".trace.jsonl");
  for (const auto& s : sq.trace)
    trace << json{{"step", s.step}, {"op", s.op}, {"branch", s.branch}, {"shapes", {{"inputs", s.inputs}, {"output", s.output}}},
                  {"mults", s.mults}}
                 .dump()
          << '\n';
  std::cout << "effective kernel " << sq.kh << "×" << sq.kw << '\n';
  std::cout << "wrote " << a.out << " (" << sq.kernel.out_channels() << "x" << sq.kernel.in_channels() << "x" << sq.kh
            << "x" << sq.kw << ", " << sq.trace.size() << " trace steps)\n";
  json r = report_header("squeeze", h.seed, h.dtype);
  r["effective_kernel"] = {sq.kh, sq.kw};
  r["kernel_shape"] = shape_vec(sq.kernel.shape());
  r["trace_steps"] = sq.trace.size();
  r["branches"] = block.branches.size();
  emit(c, r);
  return kPass;
}

// --- verify ----------------------------------------------------------------

struct VerifyArgs {
  std::size_t trials = 10;
  double tol = -1;
  std::string kernel;
  std::vector<std::size_t> hw{16, 16};
  std::size_t batch = 2;
};

template <Scalar T>
int run_verify(const Common& c, const VerifyArgs& a, const json& spec, const SpecHeader& h) {
  if (a.trials == 0) throw UsageError("--trials must be >= 1");
  if (a.hw.size() != 2 || a.hw[0] == 0 || a.hw[1] == 0 || a.batch == 0) throw UsageError("--hw and --batch must be >= 1");
  const double tol = a.tol >= 0 ? a.tol : (std::is_same_v<T, double> ? 1e-9 : 1e-3);
  const auto block = block_from_json<T>(spec);
  const KernelTensor<T> we = a.kernel.empty() ? squeeze_block(block).kernel : load_kernel<T>(a.kernel);
  const std::size_t k = block.effective_extent();
  if (we.out_channels() != block.out_ch || we.in_channels() != block.in_ch || we.kh() != k || we.kw() != k)
    throw ShapeError("kernel", "kernel does not match the block's squeezed geometry");
  double worst = 0;
  for (std::size_t t = 0; t < a.trials; ++t) {
    const auto x = random_tensor<T>({a.batch, block.in_ch, a.hw[0], a.hw[1]}, derive_seed(h.seed, 0x76657269ULL, t));
    const auto y1 = conv2d_direct(x, we, block.output_geometry());
    const auto y2 = expanded_forward(block, x);
    worst = std::max(worst, static_cast<double>(max_abs_diff<T>(y1.data(), y2.data())));
  }
  const bool ok = worst <= tol;
  std::cout << "trials " << a.trials << "  max residual " << fmt(worst) << "  tol " << fmt(tol) << "  "
            << (ok ? "PASS" : "FAIL") << '\n';
  json r = report_header("verify", h.seed, h.dtype);
  r["trials"] = a.trials;
  r["max_residual"] = worst;
  r["tolerance"] = tol;
  r["pass"] = ok;
  emit(c, r);
  return ok ? kPass : kViolation;
}

// --- gradcheck -------------------------------------------------------------

struct GradArgs {
  double eps = 1e-6;
  double rel_tol = 1e-6;
  double route_tol = 1e-9;
  std::vector<std::size_t> hw{6, 6};
  std::size_t batch = 1;
};

int run_gradcheck(const Common& c, const GradArgs& a, const json& spec, const SpecHeader& h) {
  const auto block = block_from_json<double>(spec);
  const auto x = random_tensor<double>({a.batch, block.in_ch, a.hw[0], a.hw[1]}, derive_seed(h.seed, 0x67726164ULL, 0));
  const auto y = conv2d_direct(x, squeeze_block(block).kernel, block.output_geometry());
  const auto g = random_tensor<double>(shape_vec(y.shape()), derive_seed(h.seed, 0x67726164ULL, 1));
  const auto res = gradient_check(block, x, g, a.eps);
  const bool ok = res.max_rel_err <= a.rel_tol && res.max_route_diff <= a.route_tol;
  std::cout << "params " << res.checked << "  max rel err " << fmt(res.max_rel_err) << "  online/offline "
            << fmt(res.max_route_diff) << "  " << (ok ? "PASS" : "FAIL") << '\n';
  json r = report_header("gradcheck", h.seed, DType::f64);
  r["params"] = res.checked;
  r["max_rel_err"] = res.max_rel_err;
  r["max_route_diff"] = res.max_route_diff;
  r["worst_index"] = res.worst_index;
  r["eps"] = a.eps;
  r["pass"] = ok;
  emit(c, r);
  return ok ? kPass : kViolation;
}

// --- dynamics --------------------------------------------------------------

struct DynArgs {
  std::string probe = "convscale";
  double eta = 0.01;
  std::size_t branches = 0;
  std::size_t dim = 0;
  std::size_t layers = 3;
  std::size_t steps = 1;
  bool identical = false;
  std::size_t active = 0;
  bool unbalanced = false;
};

json report_to_json(const DynamicsReport& d) {
  json steps = json::array();
  for (const auto& s : d.steps)
    steps.push_back({{"end_to_end", s.end_to_end}, {"observed", s.observed}, {"predicted", s.predicted},
                     {"residual_norm", s.residual_norm}});
  json j{{"probe", d.probe}, {"eta", d.eta}, {"asserted", d.asserted}, {"steps", steps}};
  for (const auto& [k, v] : d.metrics) j[k] = v;
  return j;
}

int run_dynamics(const Common& c, const DynArgs& a, std::uint64_t seed) {
  if (!(a.eta > 0)) throw UsageError("--eta must be > 0");
  if (a.steps == 0) throw UsageError("--steps must be >= 1");
  Rng rng(derive_seed(seed, 0x64796eULL, 0));
  json r = report_header("dynamics", seed, DType::f64);
  bool ok = true;
  std::ostringstream human;

  if (a.probe == "convscale") {
    const std::size_t dim = a.dim ? a.dim : 1;
    Vec w(dim, 1.0), x(dim, 1.0);
    double gamma = 1.0, g = 1.0;
    if (dim > 1) {
      w = vec::random_vector(rng, dim);
      x = vec::random_vector(rng, dim);
      gamma = rng.uniform(0.5, 1.5);
      g = rng.uniform(-1.0, 1.0);
    }
    const auto p = probe_conv_scale_update(w, gamma, x, g, a.eta);
    const auto half = probe_conv_scale_update(w, gamma, x, g, a.eta / 2);
    const double ratio = half.residual_norm == 0 ? 0.0 : p.residual_norm / half.residual_norm;
    r["probe"] = "convscale";
    r["eta"] = a.eta;
    r["observed"] = p.observed;
    r["predicted"] = p.predicted;
    r["predicted_diag"] = p.predicted_diag;
    r["residual"] = p.residual_norm;
    r["residual_half"] = half.residual_norm;
    r["residual_ratio"] = ratio;
    ok = p.residual_norm == 0.0 || (ratio >= 3.5 && ratio <= 4.5);
    human << "residual " << fmt(p.residual_norm) << "  ratio(eta/2) " << fmt(ratio);
  } else if (a.probe == "shared" || a.probe == "branchwise") {
    const bool shared = a.probe == "shared";
    const std::size_t m = a.branches ? a.branches : (shared ? 3 : 2);
    const std::size_t dim = a.dim ? a.dim : 8;
    std::vector<Vec> ws;
    for (std::size_t j = 0; j < m; ++j) ws.push_back(a.identical && j > 0 ? ws[0] : vec::random_vector(rng, dim));
    const Vec x = vec::random_vector(rng, dim);
    const double g = rng.uniform(0.5, 1.5);
    DynamicsReport d;
    if (shared) {
      d = probe_shared_gamma(ws, rng.uniform(0.5, 1.5), x, g, a.eta, a.steps);
      ok = d.metrics.at("first_order_diff") <= 1e-9 && d.metrics.at("lr_matched_diff") <= 1e-9;
    } else {
      Vec gammas(m, 1.0);
      if (a.active) {
        for (std::size_t j = a.active; j < m; ++j) {
          gammas[j] = 0.0;
          std::fill(ws[j].begin(), ws[j].end(), 0.0);
        }
      }
      d = probe_branchwise_gamma(ws, gammas, x, g, a.eta, a.steps);
      const bool conditions = d.metrics.at("condition1") > 0 && d.metrics.at("condition2") > 0;
      if (!conditions) ok = d.metrics.at("first_order_diff") <= 1e-9;
    }
    r.update(report_to_json(d));
    human << "first_order_diff " << fmt(d.metrics.at("first_order_diff"));
    if (shared) human << "  lr_matched_diff " << fmt(d.metrics.at("lr_matched_diff"));
    else human << "  conditions " << d.metrics.at("condition1") << "/" << d.metrics.at("condition2");
  } else if (a.probe == "lemma") {
    const std::size_t dim = a.dim ? a.dim : 4;
    if (a.layers == 0) throw UsageError("--layers must be >= 1");
    std::vector<std::size_t> widths(a.layers - 1);
    for (auto& w : widths) w = 1 + rng.integer(0, 3);
    const auto layers = a.unbalanced ? random_chain(rng, dim, widths) : balanced_chain(rng, dim, widths, rng.uniform(0.6, 1.4));
    const Vec x = vec::random_vector(rng, dim);
    const double g = rng.uniform(0.5, 1.5);
    const auto d = probe_multilayer_lemma(layers, x, g, a.eta, !a.unbalanced, a.steps);
    r.update(report_to_json(d));
    const double ratio = d.metrics.at("residual_ratio");
    if (d.asserted) ok = d.metrics.at("residual") <= 1e-12 || (ratio >= 3.5 && ratio <= 4.5);
    human << "layers " << a.layers << "  residual " << fmt(d.metrics.at("residual")) << "  ratio(eta/2) " << fmt(ratio)
          << (d.asserted ? "" : "  (unbalanced: not asserted)");
  } else {
    throw UsageError("--probe must be convscale, shared, branchwise or lemma");
  }
  r["pass"] = ok;
  std::cout << a.probe << ": " << human.str() << "  " << (ok ? "PASS" : "FAIL") << '\n';
  emit(c, r);
  return ok ? kPass : kViolation;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  std::vector<std::size_t> hw{56, 56};
  std::size_t batch = 32;
};

template <Scalar T>
int run_bench(const Common& c, const BenchArgs& a, const json& spec, const SpecHeader& h) {
  if (a.hw.size() != 2 || a.hw[0] == 0 || a.hw[1] == 0 || a.batch == 0) throw UsageError("--hw and --batch must be >= 1");
  const auto block = block_from_json<T>(spec);
  const auto cr = cost_report(block, a.hw[0], a.hw[1], a.batch);
  std::cout << std::left << std::setw(9) << "" << std::right << std::setw(16) << "buffer elems" << std::setw(16)
            << "mults" << '\n';
  for (const auto& [name, cc] : {std::pair{"offline", cr.offline}, std::pair{"online", cr.online}})
    std::cout << std::left << std::setw(9) << name << std::right << std::setw(16) << cc.buffer_elems << std::setw(16)
              << cc.mults << '\n';
  std::cout << "online/offline buffer ratio " << fmt(cr.buffer_ratio()) << '\n';
  json r = report_header("bench", h.seed, h.dtype);
  r["hw"] = a.hw;
  r["batch"] = a.batch;
  r["offline"] = {{"buffer_elems", cr.offline.buffer_elems}, {"mults", cr.offline.mults}};
  r["online"] = {{"buffer_elems", cr.online.buffer_elems}, {"mults", cr.online.mults}};
  r["buffer_ratio"] = cr.buffer_ratio();
  emit(c, r);
  return kPass;
}

// --- train-toy -------------------------------------------------------------

struct TrainArgs {
  std::size_t steps = 200;
  double eta = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::string mode = "online";
  std::string target;
  std::string ckpt;
  std::vector<std::size_t> hw{16, 16};
  std::size_t batch = 4;
};

template <Scalar T>
int run_train(const Common& c, const TrainArgs& a, const json& spec, const SpecHeader& h) {
  if (a.mode != "online" && a.mode != "offline") throw UsageError("--mode must be online or offline");
  if (a.hw.size() != 2 || a.hw[0] == 0 || a.hw[1] == 0 || a.batch == 0) throw UsageError("--hw and --batch must be >= 1");
  TrainConfig cfg;
  cfg.steps = a.steps;
  cfg.opt = {a.eta, a.weight_decay, a.momentum, MomentumStyle::Geometric};
  try {
    cfg.opt.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.mode = a.mode == "online" ? TrainMode::Online : TrainMode::Offline;
  cfg.batch = a.batch;
  cfg.height = a.hw[0];
  cfg.width = a.hw[1];
  cfg.seed = h.seed;
  const auto block = block_from_json<T>(spec);
  KernelTensor<T> target;
  if (!a.target.empty()) {
    target = load_kernel<T>(a.target);
  } else {
    // A second draw of the same topology.
    json other = spec;
    other["seed"] = derive_seed(h.seed, 0x74617267ULL, 0) >> 1;
    target = squeeze_block(block_from_json<T>(other)).kernel;
  }
  const auto res = train_toy(block, target, cfg);
  bool strict = true;
  for (std::size_t i = 1; i < res.loss.size(); ++i) strict = strict && res.loss[i] < res.loss[i - 1];
  double checksum = 0;
  for (T v : res.final_params.values) checksum += static_cast<double>(v);

  std::cout << "mode " << a.mode << "  steps " << a.steps << "  loss " << fmt(res.loss.front()) << " -> "
            << fmt(res.loss.back()) << (res.diverged_at ? "  DIVERGED" : "") << '\n';
  json r = report_header("train-toy", h.seed, h.dtype);
  r["mode"] = a.mode;
  r["steps"] = a.steps;
  r["eta"] = a.eta;
  r["loss"] = res.loss;
  r["initial_loss"] = res.loss.front();
  r["final_loss"] = res.loss.back();
  r["strictly_decreasing"] = strict;
  r["param_count"] = res.final_params.values.size();
  r["param_checksum"] = checksum;
  r["diverged_at"] = res.diverged_at ? json(*res.diverged_at) : json(nullptr);
  if (res.final_norm) r["post_norm"] = {{"alpha", res.final_norm->alpha}, {"beta", res.final_norm->beta}};
  if (!a.ckpt.empty()) {
    std::ofstream out(a.ckpt);
    if (!out) throw UsageError("cannot write " + a.ckpt);
    out << block_to_json(res.final_block, h.seed).dump(2) << '\n';
  }
  emit(c, r);
  return res.diverged_at ? kViolation : kPass;
}

// --- analyze ---------------------------------------------------------------

struct AnalyzeArgs {
  std::string prefix;
};

template <Scalar T>
int run_analyze(const Common& c, const AnalyzeArgs& a, const json& spec, const SpecHeader& h) {
  const auto block = block_from_json<T>(spec);
  const auto sim = branch_similarity(block);
  const auto prof = channel_norm_profile(block);
  const std::string prefix = a.prefix.empty() ? c.spec : a.prefix;
  {
    std::ofstream s(prefix + ".similarity.csv");
    std::ofstream n(prefix + ".norms.csv");
    if (!s || !n) throw UsageError("cannot write CSV files at " + prefix);
    s << similarity_csv(sim);
    n << norm_profile_csv(prof);
  }
  std::cout << similarity_csv(sim);
  std::cout << "mean |cos| off-diagonal " << fmt(sim.mean_abs_off_diagonal()) << '\n';
  json r = report_header("analyze", h.seed, h.dtype);
  std::vector<std::vector<double>> rows(sim.n);
  for (std::size_t i = 0; i < sim.n; ++i) rows[i].assign(sim.cos.begin() + i * sim.n, sim.cos.begin() + (i + 1) * sim.n);
  r["similarity"] = rows;
  r["zero_branches"] = sim.zero_branches;
  r["mean_abs_off_diagonal"] = sim.mean_abs_off_diagonal();
  std::vector<std::vector<double>> norms(prof.branches);
  for (std::size_t b = 0; b < prof.branches; ++b)
    norms[b].assign(prof.norms.begin() + b * prof.channels, prof.norms.begin() + (b + 1) * prof.channels);
  r["norm_profile"] = norms;
  emit(c, r);
  return kPass;
}

template <class F>
int dispatch(const SpecHeader& h, F&& f) {
  return h.dtype == DType::f32 ? f(float{}) : f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orepa: squeeze and check online re-parameterized conv blocks"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool spec_required = true) {
    auto* opt = sub->add_option("spec", common.spec, "block-spec JSON file");
    if (spec_required) opt->required();
    sub->add_option("--json", common.json_path, "write the machine-readable report here");
  };

  SqueezeArgs sq;
  auto* c_sq = app.add_subcommand("squeeze", "squeeze a block into one kernel (OKT1) plus a trace");
  add_common(c_sq);
  c_sq->add_option("--out", sq.out, "output kernel file")->required();

  VerifyArgs vf;
  auto* c_vf = app.add_subcommand("verify", "check squeezed conv == expanded forward on random inputs");
  add_common(c_vf);
  c_vf->add_option("--trials", vf.trials, "number of random inputs");
  c_vf->add_option("--tol", vf.tol, "max |residual| (default 1e-9 f64, 1e-3 f32)");
  c_vf->add_option("--kernel", vf.kernel, "check this OKT1 kernel instead of squeezing");
  c_vf->add_option("--hw", vf.hw, "input height and width")->expected(2);
  c_vf->add_option("--batch", vf.batch, "input batch");

  GradArgs gr;
  auto* c_gr = app.add_subcommand("gradcheck", "finite-difference and online/offline gradient check (f64)");
  add_common(c_gr);
  c_gr->add_option("--eps", gr.eps, "central-difference step");
  c_gr->add_option("--hw", gr.hw, "input height and width")->expected(2);

  DynArgs dy;
  std::uint64_t dyn_seed = 0;
  auto* c_dy = app.add_subcommand("dynamics", "one-step SGD dynamics probes");
  add_common(c_dy, false);
  c_dy->add_option("--probe", dy.probe, "convscale | shared | branchwise | lemma");
  c_dy->add_option("--eta", dy.eta, "learning rate");
  c_dy->add_option("--branches", dy.branches, "branch count (shared, branchwise)");
  c_dy->add_option("--dim", dy.dim, "input dimension");
  c_dy->add_option("--layers", dy.layers, "chain depth (lemma)");
  c_dy->add_option("--steps", dy.steps, "recorded steps");
  c_dy->add_option("--seed", dyn_seed, "seed when no spec is given");
  c_dy->add_flag("--identical", dy.identical, "branchwise: all branches start equal");
  c_dy->add_option("--active", dy.active, "branchwise: zero every branch after the first N");
  c_dy->add_flag("--unbalanced", dy.unbalanced, "lemma: random (unbalanced) chain");

  BenchArgs bn;
  auto* c_bn = app.add_subcommand("bench", "analytic buffer / multiply counts, online vs offline");
  add_common(c_bn);
  c_bn->add_option("--hw", bn.hw, "feature height and width")->expected(2);
  c_bn->add_option("--batch", bn.batch, "batch size");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train-toy", "fit the squeezed kernel to a target by full-batch SGD");
  add_common(c_tr);
  c_tr->add_option("--steps", tr.steps, "SGD steps");
  c_tr->add_option("--eta", tr.eta, "learning rate");
  c_tr->add_option("--momentum", tr.momentum, "momentum coefficient");
  c_tr->add_option("--weight-decay", tr.weight_decay, "weight decay");
  c_tr->add_option("--mode", tr.mode, "online | offline");
  c_tr->add_option("--target", tr.target, "target kernel (OKT1); default: a second draw of the spec");
  c_tr->add_option("--ckpt", tr.ckpt, "write the trained block as a spec here");
  c_tr->add_option("--hw", tr.hw, "input height and width")->expected(2);
  c_tr->add_option("--batch", tr.batch, "batch size");

  AnalyzeArgs an;
  auto* c_an = app.add_subcommand("analyze", "branch cosine similarity and per-channel norm profile");
  add_common(c_an);
  c_an->add_option("--out-prefix", an.prefix, "CSV path prefix (default: the spec path)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (c_dy->parsed()) {
      std::uint64_t seed = dyn_seed;
      if (!common.spec.empty()) seed = read_header(load_json_file(common.spec)).seed;
      return run_dynamics(common, dy, seed);
    }
    const json spec = load_json_file(common.spec);
    const SpecHeader h = read_header(spec);
    if (c_sq->parsed()) return dispatch(h, [&](auto t) { return run_squeeze<decltype(t)>(common, sq, spec, h); });
    if (c_vf->parsed()) return dispatch(h, [&](auto t) { return run_verify<decltype(t)>(common, vf, spec, h); });
    if (c_gr->parsed()) return run_gradcheck(common, gr, spec, h);
    if (c_bn->parsed()) return dispatch(h, [&](auto t) { return run_bench<decltype(t)>(common, bn, spec, h); });
    if (c_tr->parsed()) return dispatch(h, [&](auto t) { return run_train<decltype(t)>(common, tr, spec, h); });
    if (c_an->parsed()) return dispatch(h, [&](auto t) { return run_analyze<decltype(t)>(common, an, spec, h); });
  } catch (const MergeError& e) {
    std::cerr << "merge error: " << e.what() << '\n';
    return kMerge;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kMerge;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMerge;
  }
  return kUsage;
}
