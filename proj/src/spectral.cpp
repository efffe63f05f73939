#include "tsda/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

namespace tsda::spectral {
namespace {

constexpr double kPi = std::numbers::pi;

std::size_t last_axis(const Shape& s) { return s.empty() ? 0 : s.back(); }

Shape with_last_axis(Shape s, std::size_t n) {
  s.back() = n;
  return s;
}

double safe_phase(double re, double im) { return (re == 0.0 && im == 0.0) ? 0.0 : std::atan2(im, re); }

}  // namespace

SpectralWeights SpectralWeights::identity(std::size_t channels, std::size_t modes) {
  SpectralWeights w{ComplexTensor({channels, modes})};
  std::fill(w.weights.re.begin(), w.weights.re.end(), 1.0);
  return w;
}

std::size_t one_sided_length(std::size_t length) { return length / 2 + 1; }

std::size_t default_modes(std::size_t length) { return std::min<std::size_t>(64, one_sided_length(length)); }

Tensor hann_window(std::size_t n) {
  if (n < 2) throw std::invalid_argument("hann_window: N must be >= 2, got " + std::to_string(n));
  Tensor w({n});
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / denom);
  return w;
}

Tensor smooth(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("smooth: expected [d x T], got " + shape_string(x.shape()));
  const std::size_t d = x.dim(0), T = x.dim(1);
  const Tensor w = hann_window(T);
  Tensor y(x.shape());
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t t = 0; t < T; ++t) y.at(c, t) = x.at(c, t) * w[t];
  return y;
}

DftPlan::DftPlan(std::size_t length) : length_(length), cos_(length), sin_(length) {
  if (length == 0) throw std::invalid_argument("DftPlan: length must be >= 1");
  for (std::size_t k = 0; k < length; ++k) {
    const double angle = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(length);
    cos_[k] = std::cos(angle);
    sin_[k] = std::sin(angle);
  }
}

double DftPlan::hermitian_weight(std::size_t m) const {
  if (m == 0) return 1.0;
  if (length_ % 2 == 0 && m == length_ / 2) return 1.0;
  return 2.0;
}

void DftPlan::forward(std::span<const double> x, std::size_t modes, double* re, double* im) const {
  for (std::size_t m = 0; m < modes; ++m) {
    double sr = 0.0, si = 0.0;
    std::size_t phase = 0;
    for (std::size_t t = 0; t < length_; ++t) {
      sr += x[t] * cos_[phase];
      si -= x[t] * sin_[phase];
      phase += m;
      if (phase >= length_) phase -= length_;
    }
    re[m] = sr;
    im[m] = si;
  }
}

void DftPlan::inverse(const double* re, const double* im, std::size_t modes, std::span<double> out) const {
  const double scale = 1.0 / static_cast<double>(length_);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t m = 0; m < modes; ++m) {
    const double w = hermitian_weight(m) * scale;
    const double r = re[m] * w, i = im[m] * w;
    std::size_t phase = 0;
    for (std::size_t n = 0; n < length_; ++n) {
      out[n] += r * cos_[phase] - i * sin_[phase];
      phase += m;
      if (phase >= length_) phase -= length_;
    }
  }
}

ComplexTensor dft_forward(const Tensor& x) {
  if (x.rank() < 1 || x.size() == 0) throw ShapeError("dft_forward: empty input");
  const std::size_t T = last_axis(x.shape());
  const std::size_t bins = one_sided_length(T);
  const std::size_t rows = x.size() / T;
  const DftPlan plan(T);
  ComplexTensor v(with_last_axis(x.shape(), bins));
  for (std::size_t r = 0; r < rows; ++r)
    plan.forward(x.span().subspan(r * T, T), bins, v.re.data() + r * bins, v.im.data() + r * bins);
  return v;
}

Tensor dft_inverse(const ComplexTensor& v, std::size_t length) {
  if (length == 0) throw std::invalid_argument("dft_inverse: length must be >= 1");
  const std::size_t bins = last_axis(v.shape);
  if (bins != one_sided_length(length))
    throw ShapeError("dft_inverse: spectrum has " + std::to_string(bins) + " bins, length " + std::to_string(length) +
                     " needs " + std::to_string(one_sided_length(length)));
  const std::size_t rows = v.size() / bins;
  const DftPlan plan(length);
  Tensor x(with_last_axis(v.shape, length));
  for (std::size_t r = 0; r < rows; ++r)
    plan.inverse(v.re.data() + r * bins, v.im.data() + r * bins, bins, x.span().subspan(r * length, length));
  return x;
}

PolarSpectrum to_polar(const ComplexTensor& v, std::size_t length) {
  if (length == 0) throw std::invalid_argument("to_polar: length must be >= 1");
  Shape shape = v.shape;
  if (shape.size() == 1) shape.insert(shape.begin(), 1);
  PolarSpectrum s{Tensor(shape), Tensor(shape), length};
  const double inv_t = 1.0 / static_cast<double>(length);
  for (std::size_t i = 0; i < v.size(); ++i) {
    s.amplitude[i] = std::hypot(v.re[i], v.im[i]) * inv_t;
    s.phase[i] = safe_phase(v.re[i], v.im[i]);
  }
  return s;
}

ComplexTensor from_polar(const PolarSpectrum& s) {
  if (s.amplitude.shape() != s.phase.shape()) throw ShapeError("from_polar: amplitude/phase shape mismatch");
  ComplexTensor v(s.amplitude.shape());
  const double t = static_cast<double>(s.length);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double a = s.amplitude[i];
    if (a < 0.0) throw std::invalid_argument("from_polar: negative amplitude at index " + std::to_string(i));
    v.re[i] = t * a * std::cos(s.phase[i]);
    v.im[i] = t * a * std::sin(s.phase[i]);
  }
  return v;
}

ComplexTensor truncate_modes(const ComplexTensor& v, std::size_t modes) {
  if (modes == 0) throw std::invalid_argument("truncate_modes: M must be >= 1");
  const std::size_t bins = last_axis(v.shape);
  if (modes > bins)
    throw ShapeError("truncate_modes: M=" + std::to_string(modes) + " exceeds " + std::to_string(bins) + " bins");
  const std::size_t rows = v.size() / bins;
  ComplexTensor out(with_last_axis(v.shape, modes));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.re.begin() + r * bins, modes, out.re.begin() + r * modes);
    std::copy_n(v.im.begin() + r * bins, modes, out.im.begin() + r * modes);
  }
  return out;
}

ComplexTensor pad_modes(const ComplexTensor& v, std::size_t bins) {
  const std::size_t modes = last_axis(v.shape);
  if (bins < modes) throw ShapeError("pad_modes: target shorter than input");
  const std::size_t rows = v.size() / std::max<std::size_t>(modes, 1);
  ComplexTensor out(with_last_axis(v.shape, bins));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.re.begin() + r * modes, modes, out.re.begin() + r * bins);
    std::copy_n(v.im.begin() + r * modes, modes, out.im.begin() + r * bins);
  }
  return out;
}

ComplexTensor spectral_convolution(const ComplexTensor& v, const SpectralWeights& b) {
  if (v.shape != b.weights.shape)
    throw ShapeError("spectral_convolution: spectrum " + shape_string(v.shape) + " vs weights " +
                     shape_string(b.weights.shape));
  ComplexTensor out(v.shape);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double br = b.weights.re[i], bi = b.weights.im[i];
    out.re[i] = br * v.re[i] - bi * v.im[i];
    out.im[i] = br * v.im[i] + bi * v.re[i];
  }
  return out;
}

std::pair<Tensor, Tensor> batch_spectrum(const Tensor& x, std::size_t modes, bool apply_window) {
  if (x.rank() != 3) throw ShapeError("batch_spectrum: expected [N x d x T], got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0), d = x.dim(1), T = x.dim(2);
  if (modes == 0 || modes > one_sided_length(T))
    throw std::invalid_argument("batch_spectrum: M=" + std::to_string(modes) + " must be in [1, " +
                                std::to_string(one_sided_length(T)) + "]");
  const DftPlan plan(T);
  const Tensor window = apply_window ? hann_window(T) : Tensor({T}, 1.0);
  Tensor re({N, d, modes}), im({N, d, modes});
  std::vector<double> buffer(T);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t t = 0; t < T; ++t) buffer[t] = x.at(n, c, t) * window[t];
      plan.forward(buffer, modes, &re.at(n, c, 0), &im.at(n, c, 0));
    }
  return {std::move(re), std::move(im)};
}

std::pair<Var, Var> spectral_convolution(Var v_re, Var v_im, Var b_re, Var b_im) {
  Tape& tape = *v_re.tape;
  const Tensor& vr = v_re.value();
  const Tensor& vi = v_im.value();
  const Tensor& br = b_re.value();
  const Tensor& bi = b_im.value();
  if (vr.rank() != 3 || vi.shape() != vr.shape())
    throw ShapeError("spectral_convolution: spectrum must be [N x d x M] pairs");
  const Shape per_sample{vr.dim(1), vr.dim(2)};
  require_shape(br, per_sample, "spectral_convolution weights (re)");
  require_shape(bi, per_sample, "spectral_convolution weights (im)");
  const std::size_t N = vr.dim(0), P = br.size();

  Tensor out_re(vr.shape()), out_im(vr.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < P; ++j) {
      const std::size_t i = n * P + j;
      out_re[i] = br[j] * vr[i] - bi[j] * vi[i];
      out_im[i] = br[j] * vi[i] + bi[j] * vr[i];
    }
  const bool needs = tape.any_requires_grad({v_re, v_im, b_re, b_im});
  Var re = tape.record(std::move(out_re), needs, [=](Tape& t, const Tensor& g) {
    const Tensor& vr = t.value(v_re);
    const Tensor& vi = t.value(v_im);
    const Tensor& br = t.value(b_re);
    const Tensor& bi = t.value(b_im);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < P; ++j) {
        const std::size_t i = n * P + j;
        if (t.requires_grad(b_re)) t.grad(b_re)[j] += g[i] * vr[i];
        if (t.requires_grad(b_im)) t.grad(b_im)[j] -= g[i] * vi[i];
        if (t.requires_grad(v_re)) t.grad(v_re)[i] += g[i] * br[j];
        if (t.requires_grad(v_im)) t.grad(v_im)[i] -= g[i] * bi[j];
      }
  });
  Var im = tape.record(std::move(out_im), needs, [=](Tape& t, const Tensor& g) {
    const Tensor& vr = t.value(v_re);
    const Tensor& vi = t.value(v_im);
    const Tensor& br = t.value(b_re);
    const Tensor& bi = t.value(b_im);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < P; ++j) {
        const std::size_t i = n * P + j;
        if (t.requires_grad(b_re)) t.grad(b_re)[j] += g[i] * vi[i];
        if (t.requires_grad(b_im)) t.grad(b_im)[j] += g[i] * vr[i];
        if (t.requires_grad(v_re)) t.grad(v_re)[i] += g[i] * bi[j];
        if (t.requires_grad(v_im)) t.grad(v_im)[i] += g[i] * br[j];
      }
  });
  return {re, im};
}

Var polar_features(Var re, Var im, std::size_t length) {
  Tape& tape = *re.tape;
  const Tensor& r = re.value();
  const Tensor& i = im.value();
  if (r.rank() != 3 || i.shape() != r.shape()) throw ShapeError("polar_features: expected [N x d x M] pairs");
  const std::size_t N = r.dim(0), P = r.dim(1) * r.dim(2);
  const double inv_t = 1.0 / static_cast<double>(length);
  Tensor out({N, 2 * P});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < P; ++j) {
      const std::size_t k = n * P + j;
      out[n * 2 * P + j] = std::hypot(r[k], i[k]) * inv_t;
      out[n * 2 * P + P + j] = safe_phase(r[k], i[k]);
    }
  return tape.record(std::move(out), tape.any_requires_grad({re, im}), [=](Tape& t, const Tensor& g) {
    const Tensor& r = t.value(re);
    const Tensor& i = t.value(im);
    Tensor* gr = t.requires_grad(re) ? &t.grad(re) : nullptr;
    Tensor* gi = t.requires_grad(im) ? &t.grad(im) : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < P; ++j) {
        const std::size_t k = n * P + j;
        const double mag2 = r[k] * r[k] + i[k] * i[k];
        if (mag2 == 0.0) continue;
        const double mag = std::sqrt(mag2);
        const double ga = g[n * 2 * P + j] * inv_t / mag;
        const double gp = g[n * 2 * P + P + j] / mag2;
        if (gr) (*gr)[k] += ga * r[k] - gp * i[k];
        if (gi) (*gi)[k] += ga * i[k] + gp * r[k];
      }
  });
}

Var polar_to_series(Var features, std::size_t channels, std::size_t modes, std::size_t length) {
  Tape& tape = *features.tape;
  const Tensor& f = features.value();
  const std::size_t P = channels * modes;
  if (f.rank() != 2 || f.dim(1) != 2 * P)
    throw ShapeError("polar_to_series: expected [N x " + std::to_string(2 * P) + "], got " + shape_string(f.shape()));
  if (modes > one_sided_length(length)) throw ShapeError("polar_to_series: more modes than one-sided bins");
  const std::size_t N = f.dim(0);
  const double T = static_cast<double>(length);
  auto plan = std::make_shared<DftPlan>(length);

  Tensor out({N, channels, length});
  std::vector<double> re(modes), im(modes);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t m = 0; m < modes; ++m) {
        const double a = f[n * 2 * P + c * modes + m];
        const double p = f[n * 2 * P + P + c * modes + m];
        re[m] = T * a * std::cos(p);
        im[m] = T * a * std::sin(p);
      }
      plan->inverse(re.data(), im.data(), modes, out.span().subspan((n * channels + c) * length, length));
    }

  return tape.record(std::move(out), tape.requires_grad(features), [=](Tape& t, const Tensor& g) {
    const Tensor& f = t.value(features);
    Tensor& gf = t.grad(features);
    const double scale = 1.0 / T;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < channels; ++c) {
        const double* grow = g.data() + (n * channels + c) * length;
        for (std::size_t m = 0; m < modes; ++m) {
          // x[t] += w_m/T (Re v cos - Im v sin)  =>  adjoints of Re v and Im v.
          double g_re = 0.0, g_im = 0.0;
          for (std::size_t s = 0; s < length; ++s) {
            g_re += grow[s] * plan->cos_at(m, s);
            g_im -= grow[s] * plan->sin_at(m, s);
          }
          const double w = plan->hermitian_weight(m) * scale;
          g_re *= w;
          g_im *= w;
          const std::size_t ia = n * 2 * P + c * modes + m;
          const std::size_t ip = ia + P;
          const double a = f[ia], p = f[ip];
          const double cp = std::cos(p), sp = std::sin(p);
          gf[ia] += T * (g_re * cp + g_im * sp);
          gf[ip] += T * a * (-g_re * sp + g_im * cp);
        }
      }
  });
}

}  // namespace tsda::spectral
