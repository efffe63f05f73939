#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tsda/config.hpp"
#include "tsda/data.hpp"
#include "tsda/pipeline.hpp"

namespace tsda::eval {

/// Fraction of positions where preds == labels. Throws on empty or
/// mismatched input.
double accuracy(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels);

/// F1 per class in [0, classes); a class that never occurs in `labels` gets
/// NaN and is left out of the macro mean. precision + recall = 0 gives 0.
std::vector<double> per_class_f1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                                 std::size_t classes);
double macro_f1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels, std::size_t classes);

/// Harmonic mean of common- and private-class accuracy; 0 when both are 0.
double h_score(double ca_c, double ca_u);

struct MetricsReport {
  std::size_t samples = 0;
  bool universal = false;
  std::size_t classes = 0;  // label space of the target
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;  // indexed like the confusion matrix
  /// Rows are truths, columns predictions. In universal mode the last index
  /// is "unknown" and private-class truths are counted in that row.
  std::vector<std::vector<std::size_t>> confusion;
  double ca_c = 0.0;
  double ca_u = 0.0;  // NaN without private samples
  double h_score = 0.0;
  double unknown_rate = 0.0;

  KeyValues to_keyvalues() const;
  std::string confusion_csv() const;
};

/// `known` is the source label set; target labels outside it are private.
/// A common-class sample predicted unknown counts as wrong for CA_c.
MetricsReport evaluate(std::span<const std::int64_t> preds, std::span<const std::size_t> labels,
                       std::size_t classes, const std::set<std::size_t>& known, bool universal);

/// Adaptation run plus metrics on the (labelled) target.
struct RunOutcome {
  pipeline::AdaptationResult result;
  MetricsReport metrics;
};

RunOutcome run_once(const data::Dataset& source, const data::Dataset& target, const pipeline::TrainConfig& cfg);

/// One toggle combination of the ablation table.
struct GridRow {
  std::size_t index = 0;
  bool frequency_branch = true;
  pipeline::Divergence divergence = pipeline::Divergence::sinkhorn;
  bool correction = true;
};

/// The six rows in the order of the published ablation. Row 1 has no
/// source-only switch here and runs with the MMD term and no frequency
/// branch, the weakest configuration the toggles can express.
std::vector<GridRow> ablation_rows();

pipeline::TrainConfig apply(const pipeline::TrainConfig& base, const GridRow& row);

struct GridCell {
  GridRow row;
  std::uint64_t seed = 0;
  std::optional<MetricsReport> metrics;
  std::string error;  // set when the run threw
};

struct GridSummary {
  GridRow row;
  std::size_t runs = 0;
  std::size_t failures = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double macro_f1_mean = 0.0, macro_f1_std = 0.0;
  double h_mean = 0.0, h_std = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;  // row-major: rows x seeds
  std::vector<GridSummary> summary;

  /// Raw rows, one per (row, seed), comma separated with a header.
  std::string cells_csv() const;
  /// Mean and sample std per row.
  std::string summary_csv() const;
};

/// Runs every row with every seed on up to `jobs` threads. A failed run is
/// recorded and the grid continues.
GridResult run_grid(const data::Dataset& source, const data::Dataset& target, const pipeline::TrainConfig& base,
                    const std::vector<GridRow>& rows, const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1);

}  // namespace tsda::eval
