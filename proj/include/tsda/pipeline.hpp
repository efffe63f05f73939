#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsda/alignment.hpp"
#include "tsda/config.hpp"
#include "tsda/data.hpp"
#include "tsda/detection.hpp"
#include "tsda/model.hpp"

namespace tsda::pipeline {

enum class Mode { closed_set, universal };
enum class Divergence { sinkhorn, mmd };

std::string to_string(Mode m);
std::string to_string(Divergence d);
Mode parse_mode(const std::string& s);
Divergence parse_divergence(const std::string& s);

/// Predicted label used for rejected samples.
inline constexpr std::int64_t kUnknown = -1;

struct TrainConfig {
  std::size_t epochs_align = 10;
  std::size_t epochs_correct = 5;
  std::size_t batch = 32;
  double learning_rate = 1e-3;
  /// Raw weights a (classification), b (alignment), c (reconstruction);
  /// the loss uses a/(a+b+c) etc.
  double weight_classification = 1.0;
  double weight_alignment = 1.0;
  double weight_reconstruction = 0.2;
  double eta = 1e-3;
  std::size_t sinkhorn_iterations = 100;
  double cost_exponent = 2.0;
  double mmd_sigma = 0.0;  // 0 uses the median pairwise distance of each batch
  std::size_t modes = 0;   // 0 uses min(64, T/2 + 1)
  std::uint64_t seed = 0;
  Mode mode = Mode::closed_set;
  Divergence divergence = Divergence::sinkhorn;
  bool frequency_branch = true;
  bool correction = true;
  /// Refresh normalization running statistics while correcting.
  bool correction_updates_norm = true;
  std::array<std::size_t, 3> time_channels{32, 64, 64};
  std::size_t time_out_length = 1;
  bool random_spectral_init = true;
  std::size_t bootstrap = 1000;
  double alpha = 0.05;

  std::array<double, 3> normalized_weights() const;
  void validate() const;
  model::ModelConfig model_config(const data::Dataset& source) const;
  KeyValues to_keyvalues() const;
  /// Reads known keys; unknown keys are ignored so one file can hold
  /// generation and training settings.
  static TrainConfig from_keyvalues(const KeyValues& kv);
};

struct EpochLoss {
  std::size_t stage = 1;
  std::size_t epoch = 0;
  double classification = 0.0;
  double alignment = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
};

struct Stage2Output {
  std::vector<std::size_t> assigned;  // argmax prototype before correction
  std::vector<double> d_align;
  std::vector<double> d_correct;
};

struct AdaptationResult {
  model::Model model;  // final parameters (after correction when enabled)
  std::vector<EpochLoss> trace;
  std::vector<std::int64_t> predictions;
  std::vector<detection::DriftRecord> drift;
  std::vector<detection::BimodalDecision> decisions;
};

/// Stage 1: joint classification, alignment and reconstruction training.
/// Appends one EpochLoss per epoch to `trace` when given.
model::Model stage1_align(const data::Dataset& source, const data::Dataset& target, const TrainConfig& cfg,
                          std::vector<EpochLoss>* trace = nullptr);

/// Stage 2: records prototype distances, retrains encoder and decoder on
/// target reconstruction with the prototypes frozen, records distances again.
/// With correction disabled or epochs_correct = 0 the model is unchanged and
/// d_correct = d_align.
Stage2Output stage2_correct(const data::Dataset& target, model::Model& model, const TrainConfig& cfg,
                            std::vector<EpochLoss>* trace = nullptr);

/// Stage 3: closed-set predictions come from `model`; universal predictions
/// keep the assigned class unless the drift test rejects the sample.
AdaptationResult stage3_infer(const data::Dataset& target, model::Model model,
                              const std::optional<Stage2Output>& drift, const TrainConfig& cfg);

/// All three stages.
AdaptationResult adapt(const data::Dataset& source, const data::Dataset& target, const TrainConfig& cfg);

/// Divergence between two feature batches as configured.
Var alignment_loss(Var zs, Var zt, const TrainConfig& cfg);

/// Composite stage-1 loss on one batch pair; the parts are written to `parts`.
Var composite_loss(Tape& tape, model::Model& model, const Tensor& xs, const std::vector<std::size_t>& ys,
                   const Tensor& xt, const TrainConfig& cfg, EpochLoss* parts = nullptr);

}  // namespace tsda::pipeline
