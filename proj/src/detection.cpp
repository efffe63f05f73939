#include "tsda/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tsda::detection {

std::string to_string(Verdict v) { return v == Verdict::unknown ? "unknown" : "known"; }

double prototype_distance(std::span<const double> z, std::span<const double> w) {
  if (z.size() != w.size())
    throw std::invalid_argument("prototype_distance: sizes " + std::to_string(z.size()) + " and " +
                                std::to_string(w.size()) + " differ");
  double dot = 0.0, zz = 0.0, ww = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    dot += z[i] * w[i];
    zz += z[i] * z[i];
    ww += w[i] * w[i];
  }
  if (!(zz > 0.0) || !(ww > 0.0)) throw std::invalid_argument("prototype_distance: zero vector");
  const double c = std::clamp(dot / (std::sqrt(zz) * std::sqrt(ww)), -1.0, 1.0);
  return 1.0 - c;
}

double drift(double d_align, double d_correct) { return std::abs(d_align - d_correct); }

// Hartigan & Hartigan (1985) dip, following the AS 217 construction with the
// later index fixes. Arrays are 1-based to stay close to the reference.
double dip_statistic(std::vector<double> samples) {
  const int n = static_cast<int>(samples.size());
  if (n < 4) throw std::invalid_argument("dip_statistic: need at least 4 samples, got " + std::to_string(n));
  for (double v : samples)
    if (!std::isfinite(v)) throw std::invalid_argument("dip_statistic: non-finite sample");
  std::sort(samples.begin(), samples.end());
  std::vector<double> x(n + 1);
  std::copy(samples.begin(), samples.end(), x.begin() + 1);
  std::vector<int> mn(n + 1), mj(n + 1), gcm(n + 2), lcm(n + 2);

  double dip = 1.0;
  int low = 1, high = n;
  if (x[n] == x[1]) return dip / (2.0 * n);

  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    while (true) {
      const int mnj = mn[j], mnmnj = mn[mnj];
      if (mnj == 1 || (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj)) break;
      mn[j] = mnmnj;
    }
  }
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    while (true) {
      const int mjk = mj[k], mjmjk = mj[mjk];
      if (mjk == n || (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk)) break;
      mj[k] = mjmjk;
    }
  }

  while (true) {
    // change points of the convex minorant, high to low
    int i = 1;
    gcm[1] = high;
    while (gcm[i] > low) {
      gcm[i + 1] = mn[gcm[i]];
      ++i;
    }
    const int l_gcm = i;
    int ig = l_gcm, ix = ig - 1;

    // and of the concave majorant, low to high
    i = 1;
    lcm[1] = low;
    while (lcm[i] < high) {
      lcm[i + 1] = mj[lcm[i]];
      ++i;
    }
    const int l_lcm = i;
    int ih = l_lcm, iv = 2;

    long double d = 0.0L;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        long double dx;
        const int gcmix = gcm[ix], lcmiv = lcm[iv];
        if (gcmix > lcmiv) {
          const int gcmi1 = gcm[ix + 1];
          dx = (lcmiv - gcmi1 + 1) -
               (static_cast<long double>(x[lcmiv]) - x[gcmi1]) * (gcmix - gcmi1) / (x[gcmix] - x[gcmi1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int lcmiv1 = lcm[iv - 1];
          dx = (static_cast<long double>(x[gcmix]) - x[lcmiv1]) * (lcmiv - lcmiv1) / (x[lcmiv] - x[lcmiv1]) -
               (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0L;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = gcm[j + 1], je = gcm[j];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double C = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (x[jj] - x[jb]) * C);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int k = ih; k < l_lcm; ++k) {
      double max_t = 1.0;
      const int kb = lcm[k], ke = lcm[k + 1];
      if (ke - kb > 1 && x[ke] != x[kb]) {
        const double C = (ke - kb) / (x[ke] - x[kb]);
        for (int kk = kb; kk <= ke; ++kk) max_t = std::max(max_t, (x[kk] - x[kb]) * C - (kk - kb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));

    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

double dip_pvalue(double dip, std::size_t n, std::size_t bootstrap, std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("dip_pvalue: n must be >= 4");
  if (bootstrap == 0) throw std::invalid_argument("dip_pvalue: need at least one bootstrap sample");
  if (dip <= 0.0) return 1.0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> sample(n);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < bootstrap; ++b) {
    for (auto& v : sample) v = unif(rng);
    if (dip_statistic(sample) >= dip) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(bootstrap);
}

namespace {

double percentile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void lloyd(const std::vector<double>& values, KMeans2Result& r) {
  r.assignment.assign(values.size(), 0);
  for (std::size_t it = 0; it < 100; ++it) {
    ++r.iterations;
    bool changed = false;
    double s[2] = {0.0, 0.0};
    std::size_t cnt[2] = {0, 0};
    for (std::size_t i = 0; i < values.size(); ++i) {
      const int a = std::abs(values[i] - r.mu2) < std::abs(values[i] - r.mu1) ? 1 : 0;
      changed = changed || a != r.assignment[i];
      r.assignment[i] = a;
      s[a] += values[i];
      ++cnt[a];
    }
    const double m1 = cnt[0] ? s[0] / static_cast<double>(cnt[0]) : r.mu1;
    const double m2 = cnt[1] ? s[1] / static_cast<double>(cnt[1]) : r.mu2;
    const double shift = std::max(std::abs(m1 - r.mu1), std::abs(m2 - r.mu2));
    r.mu1 = m1;
    r.mu2 = m2;
    if (it > 0 && !changed && shift < 1e-9) break;
  }
}

}  // namespace

double kmeans_objective(const std::vector<double>& values, const std::vector<int>& assignment) {
  if (values.size() != assignment.size()) throw std::invalid_argument("kmeans_objective: size mismatch");
  double s[2] = {0.0, 0.0}, ss[2] = {0.0, 0.0};
  std::size_t cnt[2] = {0, 0};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int a = assignment[i] ? 1 : 0;
    s[a] += values[i];
    ++cnt[a];
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int a = assignment[i] ? 1 : 0;
    const double m = s[a] / static_cast<double>(cnt[a]);
    ss[a] += (values[i] - m) * (values[i] - m);
  }
  return ss[0] + ss[1];
}

KMeans2Result kmeans2(const std::vector<double>& values) {
  if (values.size() < 2) throw std::invalid_argument("kmeans2: need at least two values");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) throw std::invalid_argument("kmeans2: all values are identical");

  KMeans2Result r;
  r.mu1 = percentile(sorted, 0.10);
  r.mu2 = percentile(sorted, 0.90);
  if (r.mu1 == r.mu2) {
    r.mu1 = sorted.front();
    r.mu2 = sorted.back();
  }
  lloyd(values, r);

  // Best threshold split of the sorted values; in 1-D the optimum is one of these.
  const std::size_t n = sorted.size();
  std::vector<double> prefix(n + 1, 0.0), prefix2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    prefix[i + 1] = prefix[i] + sorted[i];
    prefix2[i + 1] = prefix2[i] + sorted[i] * sorted[i];
  }
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_k = 1;
  for (std::size_t k = 1; k < n; ++k) {
    if (sorted[k] == sorted[k - 1]) continue;
    const double n1 = static_cast<double>(k), n2 = static_cast<double>(n - k);
    const double s1 = prefix[k], s2 = prefix[n] - prefix[k];
    const double cost = (prefix2[k] - s1 * s1 / n1) + (prefix2[n] - prefix2[k] - s2 * s2 / n2);
    if (cost < best) {
      best = cost;
      best_k = k;
    }
  }
  if (best < kmeans_objective(values, r.assignment) * (1.0 - 1e-12)) {
    r.mu1 = prefix[best_k] / static_cast<double>(best_k);
    r.mu2 = (prefix[n] - prefix[best_k]) / static_cast<double>(n - best_k);
    lloyd(values, r);
  }
  if (r.mu1 > r.mu2) {
    std::swap(r.mu1, r.mu2);
    for (auto& a : r.assignment) a = 1 - a;
  }
  return r;
}

std::vector<BimodalDecision> decide(const std::vector<DriftRecord>& records, std::size_t classes,
                                    const DetectionOptions& options) {
  std::vector<std::vector<double>> drifts(classes);
  for (const auto& r : records) {
    if (r.assigned_class >= classes)
      throw std::out_of_range("decide: class " + std::to_string(r.assigned_class) + " outside [0, " +
                              std::to_string(classes) + ")");
    drifts[r.assigned_class].push_back(r.drift);
  }
  std::vector<BimodalDecision> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& dec = out[c];
    dec.cls = c;
    dec.count = drifts[c].size();
    if (dec.count < std::max<std::size_t>(options.min_samples, 4)) continue;
    dec.tested = true;
    dec.dip = dip_statistic(drifts[c]);
    std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                      static_cast<std::uint32_t>(c)};
    std::uint64_t class_seed = 0;
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    class_seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    dec.p_value = dip_pvalue(dec.dip, dec.count, options.bootstrap, class_seed);
    const auto [lo, hi] = std::minmax_element(drifts[c].begin(), drifts[c].end());
    if (dec.p_value < options.alpha && *lo != *hi) {
      const auto km = kmeans2(drifts[c]);
      dec.bimodal = true;
      dec.mu1 = km.mu1;
      dec.mu2 = km.mu2;
    }
  }
  return out;
}

void reject(std::vector<DriftRecord>& records, const std::vector<BimodalDecision>& decisions) {
  for (auto& r : records) {
    r.verdict = Verdict::known;
    if (r.assigned_class >= decisions.size()) continue;
    const auto& dec = decisions[r.assigned_class];
    if (!dec.bimodal) continue;
    // nearest centroid, ties to the lower cluster (same rule as the Lloyd step)
    if (std::abs(r.drift - dec.mu2) < std::abs(r.drift - dec.mu1)) r.verdict = Verdict::unknown;
  }
}

}  // namespace tsda::detection
