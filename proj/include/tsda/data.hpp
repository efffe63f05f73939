#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tsda/config.hpp"
#include "tsda/tensor.hpp"

namespace tsda::data {

/// n series of shape [d x T] with optional labels in [0, classes).
struct Dataset {
  std::string domain;
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t classes = 0;
  Tensor values;                    // [n x d x T]
  std::vector<std::size_t> labels;  // empty when unlabeled

  std::size_t size() const { return values.rank() == 3 ? values.dim(0) : 0; }
  bool has_labels() const { return !labels.empty(); }

  Tensor batch(const std::vector<std::size_t>& indices) const;
  std::vector<std::size_t> label_batch(const std::vector<std::size_t>& indices) const;
  Dataset subset(const std::vector<std::size_t>& indices) const;
  std::set<std::size_t> label_inventory() const;

  /// Throws std::invalid_argument when shapes or labels are inconsistent.
  void validate() const;

  bool operator==(const Dataset& other) const = default;
};

struct ModeComponent {
  double mode = 1.0;
  double amplitude = 1.0;
  double phase = 0.0;
};

/// Applied on top of the class recipe of one domain.
struct DomainTransform {
  double time_scale = 1.0;        // gain on the whole trace
  double time_offset = 0.0;       // circular delay in samples
  double phase_jitter = 0.0;      // per-component phase drawn from +-jitter
  double frequency_detune = 0.0;  // added to every mode index
  double interference = 0.0;      // amplitude of random high-band tones
  double interference_min_mode = 0.0;  // 0 selects T/4
};

struct SyntheticSpec {
  std::string domain = "source";
  std::size_t channels = 3;
  std::size_t length = 128;
  std::size_t samples = 200;
  std::vector<std::vector<ModeComponent>> recipes;  // one per class
  double noise = 0.1;
  /// Fixed phase step between consecutive channels.
  double channel_phase = 0.7;
  DomainTransform transform;
  std::vector<double> proportions;  // over all classes; empty means uniform
  std::vector<std::size_t> excluded_classes;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class c has tones at modes 2 + 3c (amplitude 1) and 4 + 3c (amplitude 0.5).
std::vector<std::vector<ModeComponent>> default_recipes(std::size_t classes);

/// sum_k A_k cos(2 pi (m_k + detune)(t - offset) / T + phase) per channel,
/// scaled by time_scale, plus interference tones and Gaussian noise. Values
/// are rounded to 32-bit floats so a saved file round-trips exactly.
Dataset generate(const SyntheticSpec& spec);

/// Source and target specs from flat settings (shared keys plus `source.*`
/// and `target.*` overrides). A class listed in `target.private` is absent
/// from the source and vice versa.
std::pair<SyntheticSpec, SyntheticSpec> pair_specs(const KeyValues& kv);

/// Segments [i*stride, i*stride + length) of a [d x L] (or [L]) series as
/// [k x d x length]; the tail remainder is dropped.
Tensor window(const Tensor& series, std::size_t length, std::size_t stride);

/// Binary container, see README.
void save(const Dataset& ds, const std::string& path);
Dataset load(const std::string& path);

/// Delimited text: one flattened sample per row (comma, tab or space
/// separated). An optional first line `# channels=<d> length=<T>` fixes the
/// shape; a row with d*T + 1 columns carries its label in the last column.
/// Without the header d = 1 and every column is a value.
Dataset load_text(const std::string& path);

/// Loads by content: binary when the file starts with the magic bytes.
Dataset load_any(const std::string& path);

/// Stratified by class when labelled; `fraction` goes to the first part.
std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed);

}  // namespace tsda::data
