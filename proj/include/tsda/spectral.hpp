#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "tsda/autograd.hpp"
#include "tsda/tensor.hpp"

namespace tsda::spectral {

/// Amplitude/phase of retained one-sided DFT modes, per channel.
/// amplitude[c, m] = |v[c, m]| / T, phase[c, m] = atan2(Im, Re) in [-pi, pi].
struct PolarSpectrum {
  Tensor amplitude;  // [d x M]
  Tensor phase;      // [d x M]
  std::size_t length = 0;  // original series length T

  std::size_t channels() const { return amplitude.dim(0); }
  std::size_t modes() const { return amplitude.dim(1); }
};

/// Complex per-channel, per-mode multipliers B [d x M].
struct SpectralWeights {
  ComplexTensor weights;

  static SpectralWeights identity(std::size_t channels, std::size_t modes);
};

std::size_t one_sided_length(std::size_t length);

/// min(64, floor(T/2) + 1).
std::size_t default_modes(std::size_t length);

/// w[n] = 0.5 - 0.5 cos(2 pi n / (N - 1)). Requires N >= 2.
Tensor hann_window(std::size_t n);

/// Multiplies every channel of x [d x T] by hann_window(T).
Tensor smooth(const Tensor& x);

/// Precomputed twiddle factors for length-T transforms.
class DftPlan {
 public:
  explicit DftPlan(std::size_t length);
  std::size_t length() const { return length_; }
  std::size_t bins() const { return one_sided_length(length_); }
  double cos_at(std::size_t m, std::size_t t) const { return cos_[(m * t) % length_]; }
  double sin_at(std::size_t m, std::size_t t) const { return sin_[(m * t) % length_]; }

  /// One-sided forward transform of `x` (length T) into `re`/`im`, first
  /// `modes` coefficients only.
  void forward(std::span<const double> x, std::size_t modes, double* re, double* im) const;

  /// Real inverse transform from `modes` one-sided coefficients (higher modes
  /// taken as zero) into `out` of length T.
  void inverse(const double* re, const double* im, std::size_t modes, std::span<double> out) const;

  /// Weight of mode m in the Hermitian expansion: 1 for DC and (even T)
  /// Nyquist, 2 otherwise.
  double hermitian_weight(std::size_t m) const;

 private:
  std::size_t length_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

/// One-sided DFT along the last axis: [T] -> [T/2+1] or [d x T] -> [d x (T/2+1)].
ComplexTensor dft_forward(const Tensor& x);

/// Inverse of dft_forward for a series of length T; the last axis of `v`
/// must equal floor(T/2) + 1.
Tensor dft_inverse(const ComplexTensor& v, std::size_t length);

PolarSpectrum to_polar(const ComplexTensor& v, std::size_t length);
ComplexTensor from_polar(const PolarSpectrum& s);

/// Keeps the first `modes` coefficients along the last axis.
ComplexTensor truncate_modes(const ComplexTensor& v, std::size_t modes);

/// Zero-extends the last axis to `bins` coefficients.
ComplexTensor pad_modes(const ComplexTensor& v, std::size_t bins);

/// Elementwise complex product B[c, m] * v[c, m].
ComplexTensor spectral_convolution(const ComplexTensor& v, const SpectralWeights& b);

// Differentiable batch forms used by the encoder and decoder.

/// Smoothed, truncated one-sided spectrum of a batch x [N x d x T] as real and
/// imaginary planes [N x d x M]. Inputs are data, so the result is constant.
std::pair<Tensor, Tensor> batch_spectrum(const Tensor& x, std::size_t modes, bool apply_window = true);

/// B * v per sample, B broadcast over the batch. Returns (Re, Im).
std::pair<Var, Var> spectral_convolution(Var v_re, Var v_im, Var b_re, Var b_im);

/// [N x d x M] complex -> [N x 2dM] features: amplitude block then phase block.
Var polar_features(Var re, Var im, std::size_t length);

/// Inverse of polar_features followed by a zero-padded inverse DFT:
/// [N x 2dM] -> [N x d x T].
Var polar_to_series(Var features, std::size_t channels, std::size_t modes, std::size_t length);

}  // namespace tsda::spectral
