#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tsda/autograd.hpp"
#include "tsda/config.hpp"
#include "tsda/nn.hpp"
#include "tsda/parameters.hpp"
#include "tsda/tensor.hpp"

namespace tsda::model {

struct ModelConfig {
  std::size_t channels = 3;
  std::size_t length = 128;
  std::size_t modes = 0;  // 0 selects spectral::default_modes(length)
  std::size_t classes = 6;
  bool frequency_branch = true;
  std::vector<std::size_t> time_channels{32, 64, 64};
  std::size_t kernel = 5;
  std::size_t pool = 2;
  std::size_t time_out_length = 1;  // adaptive pooling target per channel
  /// Initial |B| spread: B_re, B_im ~ U(-1, 1) when true, B = 1 + 0i otherwise.
  bool random_spectral_init = true;

  std::size_t resolved_modes() const;
  std::size_t frequency_dim() const;  // 2 d M, or 0 with the branch off
  std::size_t time_dim() const;
  std::size_t latent_dim() const { return frequency_dim() + time_dim(); }

  void validate() const;
  KeyValues to_keyvalues() const;
  static ModelConfig from_keyvalues(const KeyValues& kv);
};

/// Encoder outputs for one batch. e_f is absent when the frequency branch is off.
struct Encoded {
  Var z;
  Var e_f;
  Var e_t;
  bool has_frequency = false;
};

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::vector<nn::BatchNormState>& norm_states() { return norms_; }
  const std::vector<nn::BatchNormState>& norm_states() const { return norms_; }

  /// x [N x d x T]. In training mode normalization uses batch statistics and,
  /// when `update_running` is set, refreshes the running statistics.
  Encoded encode(Tape& tape, const Tensor& x, bool training, bool update_running = true);

  /// [N x d x T] reconstruction: inverse DFT of the polar features plus a
  /// transposed convolution of e_t.
  Var decode(Tape& tape, const Encoded& enc);

  /// Prototype logits W z / |z|, [N x C].
  Var logits(Tape& tape, Var z);

  /// Inference helpers (no gradients, running statistics).
  Tensor embed(const Tensor& x);
  Tensor reconstruct(const Tensor& x);
  std::vector<std::size_t> predict(const Tensor& x);

  /// Prototype matrix W [C x D_z].
  const Tensor& prototypes() const { return params_.get("classifier.W").value; }

 private:
  Var bound(Tape& tape, const std::string& name);

  ModelConfig config_;
  ParameterSet params_;
  std::vector<nn::BatchNormState> norms_;
};

/// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(Var logits, const std::vector<std::size_t>& labels);
double cross_entropy(const Tensor& logits, std::size_t label);

/// Mean absolute error.
Var reconstruction_loss(Var prediction, const Tensor& target);
double reconstruction_loss(const Tensor& x, const Tensor& x_hat);

/// Unit-normalized z dotted with every prototype row; z must be nonzero.
Tensor classify(const Tensor& z, const Tensor& prototypes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace tsda::model
