// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failed criteria (capped at 10).
//
//   acceptance --configs <dir> --cli <path to tsda> [--only 1,5,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "helpers.hpp"
#include "tsda/alignment.hpp"
#include "tsda/data.hpp"
#include "tsda/eval.hpp"
#include "tsda/logging.hpp"
#include "tsda/nn.hpp"
#include "tsda/pipeline.hpp"
#include "tsda/spectral.hpp"

using namespace tsda;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string configs_dir;
std::string cli_path;

// ---- 1 ----------------------------------------------------------------------

Outcome spectral_correctness() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  std::normal_distribution<double> n01(0, 1);
  double worst_trip = 0, worst_parseval = 0, worst_oracle = 0;
  for (int s = 0; s < 100; ++s) {
    const std::size_t T = len(rng);
    Tensor x({T});
    for (auto& v : x.values()) v = n01(rng);
    const auto v = spectral::dft_forward(x);
    const auto back = spectral::dft_inverse(v, T);
    for (std::size_t t = 0; t < T; ++t) worst_trip = std::max(worst_trip, std::abs(back[t] - x[t]));

    spectral::DftPlan plan(T);
    double time = 0, freq = 0;
    for (double a : x.values()) time += a * a;
    for (std::size_t m = 0; m < v.size(); ++m) freq += plan.hermitian_weight(m) * (v.re[m] * v.re[m] + v.im[m] * v.im[m]);
    worst_parseval = std::max(worst_parseval, std::abs(freq / static_cast<double>(T) - time) / time);

    double scale = 0;
    for (std::size_t m = 0; m <= T / 2; ++m) {
      std::complex<double> want;
      for (std::size_t t = 0; t < T; ++t)
        want += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(m * t) / static_cast<double>(T));
      worst_oracle = std::max(worst_oracle, std::abs(want - std::complex<double>(v.re[m], v.im[m])));
      scale = std::max(scale, std::abs(want));
    }
  }
  const bool ok = worst_trip <= 1e-10 && worst_parseval <= 1e-8 && worst_oracle <= 1e-10;
  return {ok, fmt("round trip %.1e, Parseval rel %.1e, oracle %.1e", worst_trip, worst_parseval, worst_oracle)};
}

// ---- 2 ----------------------------------------------------------------------

// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
double ks_pvalue(double d, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k) p += 2 * ((k % 2) ? 1 : -1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

Outcome polar_law() {
  // unit white noise: Re v, Im v ~ N(0, T/2) off DC and Nyquist, so |v|/T is
  // Rayleigh with sigma^2 = 1/(2T) and the phase is uniform
  const std::size_t T = 64, draws = 10000;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n01(0, 1);
  std::vector<double> amp, phase;
  for (std::size_t k = 0; k < draws; ++k) {
    Tensor x({1, T});
    for (auto& v : x.values()) v = n01(rng);
    const auto p = spectral::to_polar(spectral::dft_forward(x), T);
    const std::size_t m = 1 + k % (T / 2 - 1);  // one bin per series keeps draws independent
    amp.push_back(p.amplitude.at(0, m));
    phase.push_back(p.phase.at(0, m));
  }
  const double da = ks_statistic(amp, [&](double a) { return 1 - std::exp(-a * a * static_cast<double>(T)); });
  const double dp = ks_statistic(phase, [](double t) { return (t + std::numbers::pi) / (2 * std::numbers::pi); });
  const double pa = ks_pvalue(da, draws), pp = ks_pvalue(dp, draws);
  return {pa > 0.01 && pp > 0.01, fmt("Rayleigh KS D=%.4f p=%.3f, uniform KS D=%.4f p=%.3f", da, pa, dp, pp)};
}

// ---- 3 ----------------------------------------------------------------------

double permutation_ot(const Tensor& c) {
  const std::size_t n = c.dim(0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += c.at(i, perm[i]);
    best = std::min(best, s / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Outcome sinkhorn_fidelity() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0, 1);
  double worst_rel = 0, worst_marg = 0;
  std::size_t instances = 0;
  for (std::size_t n = 1; n <= 4; ++n)
    for (int rep = 0; rep < 25; ++rep) {
      Tensor s({n, 2}), t({n, 2});
      for (auto& v : s.values()) v = n01(rng);
      for (auto& v : t.values()) v = n01(rng);
      const Tensor c = alignment::cost_matrix(s, t, 2.0).cost;
      std::vector<double> all(c.values());
      std::sort(all.begin(), all.end());
      const double median = all.size() % 2 ? all[all.size() / 2] : 0.5 * (all[all.size() / 2 - 1] + all[all.size() / 2]);
      alignment::SinkhornOptions opt;
      opt.eta = 1e-4 * median;
      opt.max_iterations = 1000;
      opt.tolerance = 1e-9;
      opt.anneal = true;
      const auto r = alignment::sinkhorn_from_cost(c, opt);
      const double exact = permutation_ot(c);
      worst_rel = std::max(worst_rel, std::abs(r.loss - exact) / exact);
      worst_marg = std::max({worst_marg, r.plan.row_violation(), r.plan.column_violation()});
      ++instances;
    }
  return {worst_rel <= 0.01 && worst_marg <= 1e-6,
          fmt("%zu instances n<=4, worst rel gap %.1e, worst marginal %.1e", instances, worst_rel, worst_marg)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome gradient_integrity() {
  using testing::check_op;
  using testing::randn;
  std::vector<std::pair<std::string, double>> errors;
  auto op = [&](const std::string& name, const std::vector<Tensor>& in, const testing::Builder& b) {
    errors.emplace_back(name, check_op(in, b).max_rel_error);
  };
  const auto x3 = randn({2, 3, 8}, 1);
  op("conv1d", {x3, randn({4, 3, 3}, 2)}, [](Tape&, std::vector<Var>& v) { return nn::conv1d(v[0], v[1], 1, 1); });
  op("conv1d stride 2", {x3, randn({2, 3, 3}, 3)}, [](Tape&, std::vector<Var>& v) { return nn::conv1d(v[0], v[1], 2, 0); });
  op("batch_norm train", {x3, randn({3}, 4), randn({3}, 5)}, [](Tape&, std::vector<Var>& v) {
    nn::BatchNormState st(3);
    return nn::batch_norm(v[0], v[1], v[2], st, true);
  });
  op("batch_norm eval", {x3, randn({3}, 4), randn({3}, 5)}, [](Tape&, std::vector<Var>& v) {
    nn::BatchNormState st(3);
    st.running_mean[1] = 0.3;
    st.running_var[2] = 2.0;
    return nn::batch_norm(v[0], v[1], v[2], st, false);
  });
  op("relu", {x3}, [](Tape&, std::vector<Var>& v) { return nn::relu(v[0]); });
  op("max_pool1d", {x3}, [](Tape&, std::vector<Var>& v) { return nn::max_pool1d(v[0], 3); });
  op("adaptive_avg_pool1d", {x3}, [](Tape&, std::vector<Var>& v) { return nn::adaptive_avg_pool1d(v[0], 3); });
  op("conv_transpose1d", {randn({2, 3, 4}, 6), randn({3, 2, 3}, 7), randn({2}, 8)},
     [](Tape&, std::vector<Var>& v) { return nn::conv_transpose1d(v[0], v[1], v[2], 2, 8); });
  op("reshape/flatten/slices", {x3}, [](Tape&, std::vector<Var>& v) {
    const Var f = nn::flatten(nn::slice_rows(v[0], 1, 2));
    return nn::slice_columns(nn::reshape(f, {1, 24}), 3, 17);
  });
  op("concat/add", {randn({2, 3}, 9), randn({2, 2}, 10), randn({2, 5}, 11)},
     [](Tape&, std::vector<Var>& v) { return nn::add(nn::concat_columns(v[0], v[1]), v[2]); });
  op("normalize_rows", {randn({3, 4}, 12)}, [](Tape&, std::vector<Var>& v) { return nn::normalize_rows(v[0]); });
  op("matmul_nt", {randn({3, 4}, 13), randn({2, 4}, 14)}, [](Tape&, std::vector<Var>& v) { return nn::matmul_nt(v[0], v[1]); });
  op("spectral convolution", {randn({2, 3, 4}, 15), randn({2, 3, 4}, 16), randn({3, 4}, 17), randn({3, 4}, 18)},
     [](Tape&, std::vector<Var>& v) {
       auto [yr, yi] = spectral::spectral_convolution(v[0], v[1], v[2], v[3]);
       return nn::concat_columns(nn::flatten(yr), nn::flatten(yi));
     });
  op("polar features", {randn({2, 2, 5}, 19), randn({2, 2, 5}, 20)},
     [](Tape&, std::vector<Var>& v) { return spectral::polar_features(v[0], v[1], 9); });
  {
    auto f = randn({2, 2 * 2 * 4}, 21);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 8; ++k) f.at(i, k) = std::abs(f.at(i, k)) + 0.1;
    op("inverse polar", {f}, [](Tape&, std::vector<Var>& v) { return spectral::polar_to_series(v[0], 2, 4, 9); });
  }
  op("sinkhorn", {randn({4, 3}, 22), randn({5, 3}, 23)}, [](Tape&, std::vector<Var>& v) {
    alignment::SinkhornOptions o;
    o.eta = 0.5;
    o.max_iterations = 20;
    o.tolerance = 0;
    return alignment::sinkhorn_loss(v[0], v[1], o);
  });
  op("sinkhorn log domain", {randn({3, 2}, 24), randn({4, 2}, 25)}, [](Tape&, std::vector<Var>& v) {
    alignment::SinkhornOptions o;
    o.eta = 0.05;
    o.max_iterations = 20;
    o.tolerance = 0;
    o.domain = alignment::SinkhornDomain::log;
    return alignment::sinkhorn_loss(v[0], v[1], o);
  });
  op("mmd", {randn({4, 3}, 26), randn({5, 3}, 27)},
     [](Tape&, std::vector<Var>& v) { return alignment::mmd_loss(v[0], v[1], 1.5); });
  op("cross entropy", {randn({4, 3}, 28)},
     [](Tape&, std::vector<Var>& v) { return model::cross_entropy(v[0], {0, 2, 1, 1}); });
  op("reconstruction", {randn({2, 1, 6}, 29)},
     [](Tape&, std::vector<Var>& v) { return model::reconstruction_loss(v[0], randn({2, 1, 6}, 30)); });

  // full composite loss, both divergences, all parameters of the model
  data::SyntheticSpec spec;
  spec.channels = 2;
  spec.length = 16;
  spec.samples = 8;
  spec.recipes = data::default_recipes(2);
  spec.seed = 31;
  const auto src = data::generate(spec);
  spec.transform.time_scale = 1.4;
  spec.seed = 32;
  const auto tgt = data::generate(spec);
  for (auto d : {pipeline::Divergence::sinkhorn, pipeline::Divergence::mmd}) {
    pipeline::TrainConfig c;
    c.divergence = d;
    c.eta = 0.5;
    c.sinkhorn_iterations = 10;
    c.mmd_sigma = 1.0;
    c.modes = 5;
    c.time_channels = {3, 4, 4};
    model::Model m(c.model_config(src), 33);
    const Tensor xs = src.batch({0, 1, 2, 3}), xt = tgt.batch({0, 1, 2});
    const auto ys = src.label_batch({0, 1, 2, 3});
    auto f = [&](ParameterSet& ps, bool with_grad) {
      model::Model copy = m;
      copy.parameters() = ps;
      Tape tape;
      const Var loss = pipeline::composite_loss(tape, copy, xs, ys, xt, c);
      if (with_grad) {
        tape.backward(loss);
        ps = copy.parameters();
      }
      return loss.value()[0];
    };
    ParameterSet ps = m.parameters();
    ps.zero_grad();
    errors.emplace_back("composite loss (" + pipeline::to_string(d) + ")", grad_check(f, ps, 1e-6).max_rel_error);
  }

  auto worst = std::max_element(errors.begin(), errors.end(),
                                [](const auto& a, const auto& b) { return a.second < b.second; });
  return {worst->second < 1e-4,
          fmt("%zu checks, worst %s rel err %.1e", errors.size(), worst->first.c_str(), worst->second)};
}

// ---- 5 to 8: synthetic experiments ----------------------------------------

struct Pair {
  KeyValues kv;
  data::Dataset source, target;
};

Pair load_pair(const std::string& name, std::uint64_t seed) {
  Pair p;
  p.kv = KeyValues::load(configs_dir + "/" + name);
  p.kv.set("seed", std::to_string(seed));
  auto [s, t] = data::pair_specs(p.kv);
  p.source = data::generate(s);
  p.target = data::generate(t);
  return p;
}

eval::RunOutcome run(const Pair& p, const std::function<void(pipeline::TrainConfig&)>& tweak = {}) {
  auto cfg = pipeline::TrainConfig::from_keyvalues(p.kv);
  if (tweak) tweak(cfg);
  return eval::run_once(p.source, p.target, cfg);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : "/") + fmt("%.2f", x);
  return s;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::map<std::uint64_t, double> shifted_sinkhorn;  // shared by 5 and 6

Outcome frequency_rescue() {
  std::vector<double> full, ablated;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto p = load_pair("shifted.cfg", seed);
    full.push_back(run(p).metrics.accuracy);
    shifted_sinkhorn[seed] = full.back();
    ablated.push_back(run(p, [](auto& c) { c.frequency_branch = false; }).metrics.accuracy);
  }
  const bool ok = std::all_of(full.begin(), full.end(), [](double a) { return a >= 0.90; }) &&
                  std::all_of(ablated.begin(), ablated.end(), [](double a) { return a <= 0.70; });
  return {ok, "full " + join(full) + ", no-frequency " + join(ablated)};
}

Outcome sinkhorn_vs_mmd() {
  std::vector<double> ot, mmd;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto p = load_pair("shifted.cfg", seed);
    ot.push_back(shifted_sinkhorn.count(seed) ? shifted_sinkhorn[seed] : run(p).metrics.accuracy);
    mmd.push_back(run(p, [](auto& c) { c.divergence = pipeline::Divergence::mmd; }).metrics.accuracy);
  }
  const double a = mean(ot), b = mean(mmd);
  const bool ok = a >= b || (a >= b - 0.01 && a > 0.90 && b > 0.90);
  return {ok, fmt("mean sinkhorn %.3f vs mmd %.3f (", a, b) + join(ot) + " vs " + join(mmd) + ")"};
}

Outcome universal_detection() {
  std::vector<double> h, pvals, false_unknown;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto p = load_pair("universal.cfg", seed);
    const auto r = run(p);
    h.push_back(r.metrics.h_score);
    // the known class that absorbed most private samples before correction
    const auto known = p.source.label_inventory();
    std::map<std::size_t, std::size_t> absorbed;
    for (std::size_t i = 0; i < p.target.size(); ++i)
      if (!known.count(p.target.labels[i])) ++absorbed[r.result.drift[i].assigned_class];
    const auto top = std::max_element(absorbed.begin(), absorbed.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
    double pv = 1.0;
    for (const auto& d : r.result.decisions)
      if (top != absorbed.end() && d.cls == top->first) pv = d.p_value;
    pvals.push_back(pv);

    auto clean = load_pair("closed.cfg", seed);
    clean.kv.set("mode", "universal");
    const auto q = run(clean);
    false_unknown.push_back(q.metrics.unknown_rate);
  }
  const bool ok = std::all_of(h.begin(), h.end(), [](double v) { return v >= 0.60; }) &&
                  std::all_of(pvals.begin(), pvals.end(), [](double v) { return v < 0.05; }) &&
                  std::all_of(false_unknown.begin(), false_unknown.end(), [](double v) { return v < 0.10; });
  return {ok, "H " + join(h) + ", dip p " + join(pvals) + ", false unknowns without private class " + join(false_unknown)};
}

Outcome correction_harmless() {
  std::vector<double> on, off;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto p = load_pair("closed.cfg", seed);
    on.push_back(run(p).metrics.accuracy);
    off.push_back(run(p, [](auto& c) { c.correction = false; }).metrics.accuracy);
  }
  bool ok = true;
  for (std::size_t i = 0; i < on.size(); ++i) ok = ok && std::abs(on[i] - off[i]) <= 0.02;
  return {ok, "correction on " + join(on) + ", off " + join(off)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome gradient_probe() {
  using alignment::ProbeDivergence;
  const double m2 = alignment::gradient_probe(2, ProbeDivergence::mmd).gradient_norm;
  const double m50 = alignment::gradient_probe(50, ProbeDivergence::mmd).gradient_norm;
  const double s2 = alignment::gradient_probe(2, ProbeDivergence::sinkhorn).gradient_norm;
  const double s50 = alignment::gradient_probe(50, ProbeDivergence::sinkhorn).gradient_norm;
  return {m50 < m2 && s50 / s2 >= 0.5,
          fmt("mmd |g| %.3g at 2 sigma, %.3g at 50; sinkhorn ratio 50/2 = %.3g", m2, m50, s50 / s2)};
}

// ---- 10 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  if (cli_path.empty()) return {false, "no --cli given"};
  const fs::path root = fs::temp_directory_path() / fmt("tsda_acceptance_%d", static_cast<int>(std::random_device{}() % 100000));
  const std::string cfg = configs_dir + "/toy.cfg";
  std::vector<std::pair<std::string, std::string>> outputs;
  for (int k = 0; k < 2; ++k) {
    const fs::path d = root / std::to_string(k);
    fs::create_directories(d);
    const std::string q = "\"" + cli_path + "\"", data = (d / "data").string(), runs = (d / "run").string();
    const std::string cmds[] = {
        q + " generate --spec \"" + cfg + "\" --out \"" + data + "\"",
        q + " adapt --config \"" + cfg + "\" --source \"" + data + "/source.bin\" --target \"" + data +
            "/target.bin\" --out \"" + runs + "\"",
        q + " infer --run \"" + runs + "\" --target \"" + data + "/target.bin\"",
        q + " eval --run \"" + runs + "\" --target \"" + data + "/target.bin\" --source \"" + data + "/source.bin\"",
    };
    for (const auto& c : cmds)
      if (std::system((c + " > /dev/null 2>&1").c_str()) != 0) return {false, "command failed: " + c};
    outputs.emplace_back(slurp(d / "run" / "metrics.txt"), slurp(d / "run" / "verdicts.csv"));
  }
  fs::remove_all(root);
  const bool ok = !outputs[0].first.empty() && !outputs[0].second.empty() && outputs[0] == outputs[1];
  return {ok, fmt("metrics %zu bytes, verdicts %zu bytes, identical: %s", outputs[0].first.size(),
                  outputs[0].second.size(), outputs[0] == outputs[1] ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("--configs", configs_dir, "directory with the experiment configs")->required();
  app.add_option("--cli", cli_path, "tsda executable, used for the end-to-end determinism check");
  app.add_option("--only", only, "run a subset")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  configure_logging("quiet");

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"spectral correctness", spectral_correctness},
      {"polar decomposition law", polar_law},
      {"sinkhorn fidelity", sinkhorn_fidelity},
      {"gradient integrity", gradient_integrity},
      {"frequency rescue", frequency_rescue},
      {"sinkhorn vs mmd", sinkhorn_vs_mmd},
      {"universal detection", universal_detection},
      {"correction harmless", correction_harmless},
      {"gradient probe", gradient_probe},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %-24s %s  %s [%.1fs]\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return std::min(failed, 10);
}
