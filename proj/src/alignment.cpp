#include "tsda/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tsda::alignment {
namespace {

void require_batches(const Tensor& s, const Tensor& t, const char* what) {
  if (s.rank() != 2 || t.rank() != 2)
    throw ShapeError(std::string(what) + ": expected [n x D] and [m x D] feature batches");
  if (s.dim(0) == 0 || t.dim(0) == 0) throw std::invalid_argument(std::string(what) + ": empty batch");
  if (s.dim(1) != t.dim(1))
    throw ShapeError(std::string(what) + ": feature dimension mismatch " + std::to_string(s.dim(1)) + " vs " +
                     std::to_string(t.dim(1)));
}

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

/// Potentials f = eta log a, g = eta log b after every half-step. g[0] is the
/// all-zero start (b = 1); f[j], g[j] for j >= 1 are the iterates.
struct SinkhornTrace {
  std::vector<std::vector<double>> f;
  std::vector<std::vector<double>> g;
  bool log_domain = false;
  std::size_t earlier = 0;  // iterations spent in earlier annealing stages
};

double log_sum_exp(const double* values, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, values[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(values[i] - mx);
  return mx + std::log(s);
}

double row_violation_log(const Tensor& C, const std::vector<double>& f, const std::vector<double>& g, double eta,
                         double mu) {
  const std::size_t n = C.dim(0), m = C.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += std::exp((f[i] + g[k] - C.at(i, k)) / eta);
    worst = std::max(worst, std::abs(s - mu));
  }
  return worst;
}

SinkhornTrace run_log(const Tensor& C, const SinkhornOptions& opt, double eta, std::vector<double> g0,
                      std::size_t iterations) {
  const std::size_t n = C.dim(0), m = C.dim(1);
  const double log_mu = std::log(1.0 / static_cast<double>(n));
  const double log_nu = std::log(1.0 / static_cast<double>(m));
  SinkhornTrace tr;
  tr.log_domain = true;
  tr.f.emplace_back(n, 0.0);
  tr.g.push_back(std::move(g0));
  std::vector<double> scratch(std::max(n, m));
  for (std::size_t j = 1; j <= iterations; ++j) {
    const auto& g_prev = tr.g.back();
    std::vector<double> f(n), g(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < m; ++k) scratch[k] = (g_prev[k] - C.at(i, k)) / eta;
      f[i] = eta * (log_mu - log_sum_exp(scratch.data(), m));
    }
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - C.at(i, k)) / eta;
      g[k] = eta * (log_nu - log_sum_exp(scratch.data(), n));
    }
    tr.f.push_back(std::move(f));
    tr.g.push_back(std::move(g));
    if (opt.tolerance > 0.0 &&
        row_violation_log(C, tr.f.back(), tr.g.back(), eta, 1.0 / static_cast<double>(n)) < opt.tolerance)
      break;
  }
  return tr;
}

SinkhornTrace run_log(const Tensor& C, const SinkhornOptions& opt) {
  return run_log(C, opt, opt.eta, std::vector<double>(C.dim(1), 0.0), opt.max_iterations);
}

// eps-scaling: halve eta from max(C) down to opt.eta, warm-starting g. Every
// stage gets the full iteration budget; only the last stage's trace is kept.
SinkhornTrace run_annealed(const Tensor& C, const SinkhornOptions& opt) {
  const double top = *std::max_element(C.values().begin(), C.values().end());
  std::vector<double> etas{opt.eta};
  while (etas.back() * 2.0 < top) etas.push_back(etas.back() * 2.0);
  std::reverse(etas.begin(), etas.end());
  std::vector<double> g(C.dim(1), 0.0);
  std::size_t used = 0;
  SinkhornTrace tr;
  for (double eta : etas) {
    tr = run_log(C, opt, eta, std::move(g), opt.max_iterations);
    used += tr.f.size() - 1;
    g = tr.g.back();
  }
  tr.earlier = used - (tr.f.size() - 1);
  return tr;
}

/// Scaling iterations on a = exp(f/eta), b = exp(g/eta). Returns false when
/// a zero or non-finite entry appears.
bool run_naive(const Tensor& C, const SinkhornOptions& opt, SinkhornTrace& tr) {
  const std::size_t n = C.dim(0), m = C.dim(1);
  const double eta = opt.eta;
  const double mu = 1.0 / static_cast<double>(n), nu = 1.0 / static_cast<double>(m);
  Tensor K(C.shape());
  for (std::size_t i = 0; i < K.size(); ++i) K[i] = std::exp(-C[i] / eta);
  std::vector<double> a(n, 1.0), b(m, 1.0);
  tr = SinkhornTrace{};
  tr.f.emplace_back(n, 0.0);
  tr.g.emplace_back(m, 0.0);
  for (std::size_t j = 1; j <= opt.max_iterations; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      double kb = 0.0;
      for (std::size_t k = 0; k < m; ++k) kb += K.at(i, k) * b[k];
      if (!(kb > 0.0) || !std::isfinite(kb)) return false;
      a[i] = mu / kb;
    }
    for (std::size_t k = 0; k < m; ++k) {
      double ka = 0.0;
      for (std::size_t i = 0; i < n; ++i) ka += K.at(i, k) * a[i];
      if (!(ka > 0.0) || !std::isfinite(ka)) return false;
      b[k] = nu / ka;
    }
    std::vector<double> f(n), g(m);
    for (std::size_t i = 0; i < n; ++i) f[i] = eta * std::log(a[i]);
    for (std::size_t k = 0; k < m; ++k) g[k] = eta * std::log(b[k]);
    if (!std::all_of(f.begin(), f.end(), [](double v) { return std::isfinite(v); }) ||
        !std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); }))
      return false;
    tr.f.push_back(std::move(f));
    tr.g.push_back(std::move(g));
    if (opt.tolerance > 0.0) {
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < m; ++k) s += a[i] * K.at(i, k) * b[k];
        worst = std::max(worst, std::abs(s - mu));
      }
      if (worst < opt.tolerance) break;
    }
  }
  return true;
}

SinkhornTrace run_sinkhorn(const Tensor& C, const SinkhornOptions& opt) {
  if (!(opt.eta > 0.0)) throw std::invalid_argument("sinkhorn: eta must be positive");
  if (opt.max_iterations < 1) throw std::invalid_argument("sinkhorn: need at least one iteration");
  if (!C.all_finite()) throw std::runtime_error("sinkhorn: cost matrix is not finite");
  const auto [min_it, max_it] = std::minmax_element(C.values().begin(), C.values().end());
  if (opt.anneal) return run_annealed(C, opt);
  bool use_log = opt.domain == SinkhornDomain::log;
  if (opt.domain == SinkhornDomain::automatic) use_log = *min_it / opt.eta > 30.0 || *max_it / opt.eta > 600.0;
  if (use_log) return run_log(C, opt);
  SinkhornTrace tr;
  if (run_naive(C, opt, tr)) return tr;
  if (opt.domain == SinkhornDomain::naive)
    throw std::runtime_error("sinkhorn: kernel underflow produced a zero row in K b; increase eta or use the "
                             "log-domain mode");
  return run_log(C, opt);
}

Tensor plan_from_potentials(const Tensor& C, const std::vector<double>& f, const std::vector<double>& g, double eta) {
  Tensor P(C.shape());
  const std::size_t n = C.dim(0), m = C.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) P.at(i, k) = std::exp((f[i] + g[k] - C.at(i, k)) / eta);
  return P;
}

SinkhornResult summarize(const Tensor& C, const SinkhornTrace& tr, double eta) {
  SinkhornResult r;
  const std::size_t n = C.dim(0), m = C.dim(1);
  r.plan.plan = plan_from_potentials(C, tr.f.back(), tr.g.back(), eta);
  r.plan.mu.assign(n, 1.0 / static_cast<double>(n));
  r.plan.nu.assign(m, 1.0 / static_cast<double>(m));
  r.iterations = tr.earlier + tr.f.size() - 1;
  r.log_domain = tr.log_domain;
  for (std::size_t i = 0; i < C.size(); ++i) r.loss += C[i] * r.plan.plan[i];
  return r;
}

/// d(loss)/dC for the unrolled iterations, scaled by `upstream`.
Tensor sinkhorn_cost_gradient(const Tensor& C, const SinkhornTrace& tr, double eta, double upstream) {
  const std::size_t n = C.dim(0), m = C.dim(1);
  const std::size_t J = tr.f.size() - 1;
  const double mu = 1.0 / static_cast<double>(n), nu = 1.0 / static_cast<double>(m);
  Tensor dC(C.shape());
  std::vector<double> gf(n, 0.0), gg(m, 0.0);

  const Tensor P = plan_from_potentials(C, tr.f[J], tr.g[J], eta);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double cp = C.at(i, k) * P.at(i, k);
      dC.at(i, k) = upstream * (P.at(i, k) - cp / eta);
      gf[i] += upstream * cp / eta;
      gg[k] += upstream * cp / eta;
    }

  for (std::size_t j = J; j >= 1; --j) {
    const auto& f = tr.f[j];
    const auto& g = tr.g[j];
    const auto& g_prev = tr.g[j - 1];
    // g_k = eta log nu - eta LSE_i((f_i - C_ik)/eta); pi_ik = softmax over i.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) {
        if (gg[k] == 0.0) continue;
        const double pi = std::exp((f[i] + g[k] - C.at(i, k)) / eta) / nu;
        gf[i] -= gg[k] * pi;
        dC.at(i, k) += gg[k] * pi;
      }
    // f_i = eta log mu - eta LSE_k((g_prev_k - C_ik)/eta); sigma_ik = softmax over k.
    std::vector<double> gg_prev(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (gf[i] == 0.0) continue;
      for (std::size_t k = 0; k < m; ++k) {
        const double sigma = std::exp((f[i] + g_prev[k] - C.at(i, k)) / eta) / mu;
        dC.at(i, k) += gf[i] * sigma;
        gg_prev[k] -= gf[i] * sigma;
      }
    }
    gg = std::move(gg_prev);
    std::fill(gf.begin(), gf.end(), 0.0);
  }
  return dC;
}

/// Chain rule through C_ik = ||s_i - t_k||^p.
void cost_backward(const Tensor& s, const Tensor& t, const Tensor& dC, double p, Tensor* gs, Tensor* gt) {
  const std::size_t n = s.dim(0), m = t.dim(0), D = s.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double w = dC.at(i, k);
      if (w == 0.0) continue;
      const double d2 = squared_distance(&s.at(i, 0), &t.at(k, 0), D);
      double coeff;
      if (p == 2.0) {
        coeff = 2.0;
      } else {
        if (d2 == 0.0) continue;
        coeff = p * std::pow(d2, 0.5 * p - 1.0);
      }
      for (std::size_t q = 0; q < D; ++q) {
        const double diff = s.at(i, q) - t.at(k, q);
        if (gs) gs->at(i, q) += w * coeff * diff;
        if (gt) gt->at(k, q) -= w * coeff * diff;
      }
    }
}

}  // namespace

CostMatrix cost_matrix(const Tensor& source, const Tensor& target, double p) {
  require_batches(source, target, "cost_matrix");
  if (!(p > 0.0)) throw std::invalid_argument("cost_matrix: exponent p must be positive");
  const std::size_t n = source.dim(0), m = target.dim(0), D = source.dim(1);
  CostMatrix out{Tensor({n, m}), p};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double d2 = squared_distance(&source.at(i, 0), &target.at(k, 0), D);
      out.cost.at(i, k) = p == 2.0 ? d2 : std::pow(std::sqrt(d2), p);
    }
  return out;
}

double TransportPlan::row_violation() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < plan.dim(0); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < plan.dim(1); ++k) s += plan.at(i, k);
    worst = std::max(worst, std::abs(s - mu[i]));
  }
  return worst;
}

double TransportPlan::column_violation() const {
  double worst = 0.0;
  for (std::size_t k = 0; k < plan.dim(1); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < plan.dim(0); ++i) s += plan.at(i, k);
    worst = std::max(worst, std::abs(s - nu[k]));
  }
  return worst;
}

SinkhornResult sinkhorn_from_cost(const Tensor& cost, const SinkhornOptions& options) {
  if (cost.rank() != 2 || cost.size() == 0) throw ShapeError("sinkhorn: cost must be a non-empty [n x m] matrix");
  return summarize(cost, run_sinkhorn(cost, options), options.eta);
}

SinkhornResult sinkhorn(const Tensor& source, const Tensor& target, const SinkhornOptions& options) {
  return sinkhorn_from_cost(cost_matrix(source, target, options.p).cost, options);
}

Var sinkhorn_loss(Var source, Var target, const SinkhornOptions& options, SinkhornResult* info) {
  if (options.anneal) throw std::invalid_argument("sinkhorn_loss: annealed iterations have no unrolled gradient");
  Tape& tape = *source.tape;
  Tensor C = cost_matrix(source.value(), target.value(), options.p).cost;
  auto trace = std::make_shared<SinkhornTrace>(run_sinkhorn(C, options));
  SinkhornResult result = summarize(C, *trace, options.eta);
  if (info) *info = result;
  const double p = options.p, eta = options.eta;
  auto cost = std::make_shared<Tensor>(std::move(C));
  return tape.record(Tensor({1}, result.loss), tape.any_requires_grad({source, target}),
                     [source, target, trace, cost, p, eta](Tape& t, const Tensor& g) {
                       const Tensor dC = sinkhorn_cost_gradient(*cost, *trace, eta, g[0]);
                       Tensor* gs = t.requires_grad(source) ? &t.grad(source) : nullptr;
                       Tensor* gt = t.requires_grad(target) ? &t.grad(target) : nullptr;
                       cost_backward(t.value(source), t.value(target), dC, p, gs, gt);
                     });
}

double mmd_loss(const Tensor& source, const Tensor& target, double sigma) {
  require_batches(source, target, "mmd_loss");
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd_loss: sigma must be positive");
  const std::size_t n = source.dim(0), m = target.dim(0), D = source.dim(1);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  auto mean_kernel = [&](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(0); ++i)
      for (std::size_t k = 0; k < b.dim(0); ++k) s += std::exp(-squared_distance(&a.at(i, 0), &b.at(k, 0), D) * inv);
    return s / static_cast<double>(a.dim(0) * b.dim(0));
  };
  (void)n;
  (void)m;
  return mean_kernel(source, source) + mean_kernel(target, target) - 2.0 * mean_kernel(source, target);
}

Var mmd_loss(Var source, Var target, double sigma) {
  Tape& tape = *source.tape;
  const double value = mmd_loss(source.value(), target.value(), sigma);
  return tape.record(Tensor({1}, value), tape.any_requires_grad({source, target}),
                     [source, target, sigma](Tape& t, const Tensor& g) {
                       const Tensor& s = t.value(source);
                       const Tensor& u = t.value(target);
                       const std::size_t D = s.dim(1);
                       const double inv = 1.0 / (2.0 * sigma * sigma);
                       // Accumulates coeff * d k(a_i, b_k) / d a_i and / d b_k into the given buffers.
                       auto pair_grad = [&](const Tensor& a, const Tensor& b, double coeff, Tensor* ga, Tensor* gb) {
                         for (std::size_t i = 0; i < a.dim(0); ++i)
                           for (std::size_t k = 0; k < b.dim(0); ++k) {
                             const double kv = std::exp(-squared_distance(&a.at(i, 0), &b.at(k, 0), D) * inv);
                             const double w = coeff * kv * (-2.0 * inv);
                             for (std::size_t q = 0; q < D; ++q) {
                               const double diff = a.at(i, q) - b.at(k, q);
                               if (ga) ga->at(i, q) += w * diff;
                               if (gb) gb->at(k, q) -= w * diff;
                             }
                           }
                       };
                       const double n = static_cast<double>(s.dim(0)), m = static_cast<double>(u.dim(0));
                       Tensor* gs = t.requires_grad(source) ? &t.grad(source) : nullptr;
                       Tensor* gt = t.requires_grad(target) ? &t.grad(target) : nullptr;
                       if (gs) pair_grad(s, s, g[0] / (n * n), gs, gs);
                       if (gt) pair_grad(u, u, g[0] / (m * m), gt, gt);
                       pair_grad(s, u, -2.0 * g[0] / (n * m), gs, gt);
                     });
}

double median_pairwise_distance(const Tensor& source, const Tensor& target) {
  require_batches(source, target, "median_pairwise_distance");
  const std::size_t D = source.dim(1);
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < source.dim(0); ++i) rows.push_back(&source.at(i, 0));
  for (std::size_t i = 0; i < target.dim(0); ++i) rows.push_back(&target.at(i, 0));
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = i + 1; k < rows.size(); ++k) d.push_back(std::sqrt(squared_distance(rows[i], rows[k], D)));
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > 0.0 ? *mid : 1.0;
}

double exact_transport_cost(const Tensor& cost) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1) || cost.dim(0) == 0)
    throw ShapeError("exact_transport_cost: expected a non-empty square cost matrix");
  const std::size_t n = cost.dim(0);
  if (n > 8) throw std::invalid_argument("exact_transport_cost: enumeration limited to n <= 8");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost.at(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

std::string to_string(ProbeDivergence d) {
  switch (d) {
    case ProbeDivergence::sinkhorn: return "sinkhorn";
    case ProbeDivergence::mmd: return "mmd";
    case ProbeDivergence::kl_on_histograms: return "kl_on_histograms";
  }
  return "unknown";
}

namespace {

/// KL(p_s || p_t) between Gaussian-binned histograms of the first coordinate.
double histogram_kl(const Tensor& s, const Tensor& t, double lo, double hi, std::size_t bins) {
  const double width = (hi - lo) / static_cast<double>(bins);
  auto histogram = [&](const Tensor& x) {
    std::vector<double> h(bins, 0.0);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const double v = x.at(i, 0);
      for (std::size_t b = 0; b < bins; ++b) {
        const double c = lo + (static_cast<double>(b) + 0.5) * width;
        const double z = (v - c) / width;
        h[b] += std::exp(-0.5 * z * z);
      }
    }
    double total = std::accumulate(h.begin(), h.end(), 0.0);
    for (auto& v : h) v = v / std::max(total, 1e-300) + 1e-10;
    total = std::accumulate(h.begin(), h.end(), 0.0);
    for (auto& v : h) v /= total;
    return h;
  };
  const auto ps = histogram(s), pt = histogram(t);
  double kl = 0.0;
  for (std::size_t b = 0; b < bins; ++b) kl += ps[b] * std::log(ps[b] / pt[b]);
  return kl;
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

ProbeRecord gradient_probe(double shift, ProbeDivergence divergence, const ProbeOptions& options) {
  if (shift < 0.0) throw std::invalid_argument("gradient_probe: shift must be >= 0");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, options.cloud_sigma);
  const std::size_t n = options.points, D = options.dimension;
  Tensor source({n, D});
  for (auto& v : source.values()) v = normal(rng);
  Tensor target = source;
  for (std::size_t i = 0; i < n; ++i) target.at(i, 0) += shift * options.cloud_sigma;

  ProbeRecord rec{shift, divergence, 0.0, 0.0};
  if (divergence == ProbeDivergence::kl_on_histograms) {
    const double pad = 4.0 * options.cloud_sigma;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const Tensor* x : {&source, &target})
      for (std::size_t i = 0; i < n; ++i) {
        lo = std::min(lo, x->at(i, 0));
        hi = std::max(hi, x->at(i, 0));
      }
    lo -= pad;
    hi += pad;
    rec.loss = histogram_kl(source, target, lo, hi, options.histogram_bins);
    Tensor grad(source.shape());
    const double h = 1e-5 * options.cloud_sigma;
    for (std::size_t i = 0; i < source.size(); ++i) {
      Tensor plus = source, minus = source;
      plus[i] += h;
      minus[i] -= h;
      grad[i] = (histogram_kl(plus, target, lo, hi, options.histogram_bins) -
                 histogram_kl(minus, target, lo, hi, options.histogram_bins)) /
                (2.0 * h);
    }
    rec.gradient_norm = frobenius(grad);
    return rec;
  }

  Parameter src{source, Tensor(source.shape())};
  Tape tape;
  Var s = tape.parameter(src);
  Var t = tape.constant(target);
  Var loss = divergence == ProbeDivergence::mmd ? mmd_loss(s, t, options.cloud_sigma)
                                                : sinkhorn_loss(s, t, options.sinkhorn);
  tape.backward(loss);
  rec.loss = loss.value()[0];
  rec.gradient_norm = frobenius(src.grad);
  return rec;
}

}  // namespace tsda::alignment
