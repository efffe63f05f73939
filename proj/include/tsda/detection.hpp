#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tsda::detection {

enum class Verdict { known, unknown };

std::string to_string(Verdict v);

struct DriftRecord {
  std::size_t sample_id = 0;
  std::size_t assigned_class = 0;  // argmax prototype before correction
  double d_align = 0.0;
  double d_correct = 0.0;
  double drift = 0.0;
  Verdict verdict = Verdict::known;
};

struct BimodalDecision {
  std::size_t cls = 0;
  std::size_t count = 0;
  bool tested = false;  // false when the class has too few samples
  double dip = 0.0;
  double p_value = 1.0;
  bool bimodal = false;
  double mu1 = 0.0;  // set only when bimodal
  double mu2 = 0.0;
};

/// 1 - cos(z, w), in [0, 2]. Throws on a zero vector or size mismatch.
double prototype_distance(std::span<const double> z, std::span<const double> w);

double drift(double d_align, double d_correct);

/// Hartigan dip of the sample (sorted internally). Equal-valued samples give
/// the 1/(2n) floor. Needs at least 4 values.
double dip_statistic(std::vector<double> samples);

/// Fraction of `bootstrap` Uniform(0,1) samples of size n whose dip is at
/// least `dip`.
double dip_pvalue(double dip, std::size_t n, std::size_t bootstrap, std::uint64_t seed);

struct KMeans2Result {
  double mu1 = 0.0;
  double mu2 = 0.0;
  std::vector<int> assignment;  // 0 -> mu1 cluster, 1 -> mu2 cluster
  std::size_t iterations = 0;
};

/// 1-D two-means: Lloyd iterations from the 10th/90th percentiles (at most
/// 100, tolerance 1e-9). If the converged split is beaten by the best
/// threshold split, Lloyd restarts from that split's centroids.
/// Throws when all values are identical.
KMeans2Result kmeans2(const std::vector<double>& values);

/// Within-cluster sum of squares of a 2-partition.
double kmeans_objective(const std::vector<double>& values, const std::vector<int>& assignment);

struct DetectionOptions {
  std::size_t bootstrap = 1000;
  double alpha = 0.05;
  std::size_t min_samples = 4;
  std::uint64_t seed = 0;
};

/// Dip test and, when p < alpha, two-means on the drifts of every class.
std::vector<BimodalDecision> decide(const std::vector<DriftRecord>& records, std::size_t classes,
                                    const DetectionOptions& options = {});

/// Marks samples of bimodal classes that sit in the upper (mu2) cluster as
/// unknown; everything else is known.
void reject(std::vector<DriftRecord>& records, const std::vector<BimodalDecision>& decisions);

}  // namespace tsda::detection
