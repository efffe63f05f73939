#include "tsda/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tsda::nn {
namespace {

struct ConvGeometry {
  std::size_t batch, in_channels, length, out_channels, kernel, stride, padding, out_length;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  if (x.rank() != 3) throw ShapeError("conv1d: input must be [N x C_in x L], got " + shape_string(x.shape()));
  if (w.rank() != 3) throw ShapeError("conv1d: kernels must be [C_out x C_in x K], got " + shape_string(w.shape()));
  if (w.dim(1) != x.dim(1))
    throw ShapeError("conv1d: kernel expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                     std::to_string(x.dim(1)));
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be >= 1");
  if (w.dim(2) > x.dim(2) + 2 * padding)
    throw ShapeError("conv1d: kernel size " + std::to_string(w.dim(2)) + " exceeds padded length " +
                     std::to_string(x.dim(2) + 2 * padding));
  return {x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, padding,
          conv_output_length(x.dim(2), w.dim(2), stride, padding)};
}

// Output positions o whose tap k lands inside [0, L): o*stride + k - pad in range.
inline void valid_range(const ConvGeometry& g, std::size_t k, std::size_t& lo, std::size_t& hi) {
  const long pad = static_cast<long>(g.padding);
  const long s = static_cast<long>(g.stride);
  const long kk = static_cast<long>(k);
  long first = pad - kk;  // need o*s >= pad - k
  long o_lo = first <= 0 ? 0 : (first + s - 1) / s;
  long last = static_cast<long>(g.length) - 1 + pad - kk;  // o*s <= L-1+pad-k
  long o_hi = last < 0 ? -1 : last / s;
  o_hi = std::min(o_hi, static_cast<long>(g.out_length) - 1);
  lo = static_cast<std::size_t>(o_lo);
  hi = o_hi < o_lo ? lo : static_cast<std::size_t>(o_hi + 1);
}

void conv_forward(const ConvGeometry& g, const double* x, const double* w, double* y) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      double* yrow = y + (n * g.out_channels + co) * g.out_length;
      for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        const double* xrow = x + (n * g.in_channels + ci) * g.length;
        const double* wk = w + (co * g.in_channels + ci) * g.kernel;
        for (std::size_t k = 0; k < g.kernel; ++k) {
          std::size_t lo, hi;
          valid_range(g, k, lo, hi);
          const double wv = wk[k];
          const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(g.padding);
          if (g.stride == 1) {
            const double* src = xrow + offset;
            for (std::size_t o = lo; o < hi; ++o) yrow[o] += wv * src[o];
          } else {
            for (std::size_t o = lo; o < hi; ++o) yrow[o] += wv * xrow[static_cast<std::ptrdiff_t>(o * g.stride) + offset];
          }
        }
      }
    }
  }
}

void conv_backward(const ConvGeometry& g, const double* x, const double* w, const double* gy, double* gx,
                   double* gw) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const double* grow = gy + (n * g.out_channels + co) * g.out_length;
      for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        const double* xrow = x + (n * g.in_channels + ci) * g.length;
        double* gxrow = gx ? gx + (n * g.in_channels + ci) * g.length : nullptr;
        const double* wk = w + (co * g.in_channels + ci) * g.kernel;
        double* gwk = gw ? gw + (co * g.in_channels + ci) * g.kernel : nullptr;
        for (std::size_t k = 0; k < g.kernel; ++k) {
          std::size_t lo, hi;
          valid_range(g, k, lo, hi);
          const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(g.padding);
          double acc = 0.0;
          const double wv = wk[k];
          for (std::size_t o = lo; o < hi; ++o) {
            const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(o * g.stride) + offset;
            acc += grow[o] * xrow[idx];
            if (gxrow) gxrow[idx] += wv * grow[o];
          }
          if (gwk) gwk[k] += acc;
        }
      }
    }
  }
}

void require_rank3(const Tensor& x, const char* what) {
  if (x.rank() != 3) throw ShapeError(std::string(what) + ": expected [N x C x L], got " + shape_string(x.shape()));
}

}  // namespace

std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be >= 1");
  if (kernel > length + 2 * padding) throw ShapeError("conv1d: kernel larger than padded input");
  return (length + 2 * padding - kernel) / stride + 1;
}

Tensor conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  if (input.rank() != 2) throw ShapeError("conv1d: input must be [C_in x L], got " + shape_string(input.shape()));
  const Tensor x = input.reshaped({1, input.dim(0), input.dim(1)});
  const auto g = conv_geometry(x, kernels, stride, padding);
  Tensor y({g.out_channels, g.out_length});
  conv_forward(g, x.data(), kernels.data(), y.data());
  return y;
}

Tensor max_pool1d(const Tensor& input, std::size_t window) {
  if (input.rank() != 2) throw ShapeError("max_pool1d: input must be [C x L]");
  if (window == 0) throw std::invalid_argument("max_pool1d: window must be >= 1");
  const std::size_t out_len = input.dim(1) / window;
  Tensor y({input.dim(0), out_len});
  for (std::size_t c = 0; c < input.dim(0); ++c)
    for (std::size_t o = 0; o < out_len; ++o) {
      double best = input.at(c, o * window);
      for (std::size_t k = 1; k < window; ++k) best = std::max(best, input.at(c, o * window + k));
      y.at(c, o) = best;
    }
  return y;
}

Var conv1d(Var x, Var kernels, std::size_t stride, std::size_t padding) {
  Tape& tape = *x.tape;
  const auto g = conv_geometry(x.value(), kernels.value(), stride, padding);
  Tensor y({g.batch, g.out_channels, g.out_length});
  conv_forward(g, x.value().data(), kernels.value().data(), y.data());
  return tape.record(std::move(y), tape.any_requires_grad({x, kernels}),
                     [x, kernels, g](Tape& t, const Tensor& gy) {
                       double* gx = t.requires_grad(x) ? t.grad(x).data() : nullptr;
                       double* gw = t.requires_grad(kernels) ? t.grad(kernels).data() : nullptr;
                       conv_backward(g, t.value(x).data(), t.value(kernels).data(), gy.data(), gx, gw);
                     });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require_rank3(xv, "batch_norm");
  const std::size_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  require_shape(gamma.value(), {C}, "batch_norm gamma");
  require_shape(beta.value(), {C}, "batch_norm beta");
  if (state.running_mean.size() != C) state = BatchNormState(C);
  if (training && N == 0) throw std::invalid_argument("batch_norm: empty batch in training mode");

  const std::size_t count = N * L;
  std::vector<double> mean(C), inv_std(C);
  if (training) {
    if (count == 0) throw std::invalid_argument("batch_norm: empty batch in training mode");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) s += xv.at(n, c, l);
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l) {
          const double d = xv.at(n, c, l) - mu;
          ss += d * d;
        }
      const double var = ss / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < L; ++l) {
        const double h = (xv.at(n, c, l) - mean[c]) * inv_std[c];
        xhat.at(n, c, l) = h;
        y.at(n, c, l) = gv[c] * h + bv[c];
      }

  return tape.record(
      std::move(y), tape.any_requires_grad({x, gamma, beta}),
      [x, gamma, beta, xhat = std::move(xhat), inv_std, training, N, C, L](Tape& t, const Tensor& gy) {
        const Tensor& gv = t.value(gamma);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          for (std::size_t c = 0; c < C; ++c) {
            double sg = 0.0, sgh = 0.0;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t l = 0; l < L; ++l) {
                sg += gy.at(n, c, l);
                sgh += gy.at(n, c, l) * xhat.at(n, c, l);
              }
            if (t.requires_grad(gamma)) t.grad(gamma)[c] += sgh;
            if (t.requires_grad(beta)) t.grad(beta)[c] += sg;
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad(x);
        const double m = static_cast<double>(N * L);
        for (std::size_t c = 0; c < C; ++c) {
          if (!training) {
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t l = 0; l < L; ++l) gx.at(n, c, l) += gy.at(n, c, l) * gv[c] * inv_std[c];
            continue;
          }
          double sum_d = 0.0, sum_dh = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t l = 0; l < L; ++l) {
              const double d = gy.at(n, c, l) * gv[c];
              sum_d += d;
              sum_dh += d * xhat.at(n, c, l);
            }
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t l = 0; l < L; ++l) {
              const double d = gy.at(n, c, l) * gv[c];
              gx.at(n, c, l) += inv_std[c] / m * (m * d - sum_d - xhat.at(n, c, l) * sum_dh);
            }
        }
      });
}

Var relu(Var x) {
  Tape& tape = *x.tape;
  Tensor y = x.value();
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(y), tape.requires_grad(x), [x](Tape& t, const Tensor& gy) {
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += gy[i];
  });
}

Var max_pool1d(Var x, std::size_t window) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require_rank3(xv, "max_pool1d");
  if (window == 0) throw std::invalid_argument("max_pool1d: window must be >= 1");
  const std::size_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2), out_len = L / window;
  if (out_len == 0) throw ShapeError("max_pool1d: window larger than input length");
  Tensor y({N, C, out_len});
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t o = 0; o < out_len; ++o) {
        std::size_t best = o * window;
        for (std::size_t k = 1; k < window; ++k)
          if (xv.at(n, c, o * window + k) > xv.at(n, c, best)) best = o * window + k;
        const std::size_t flat = (n * C + c) * out_len + o;
        argmax[flat] = (n * C + c) * L + best;
        y[flat] = xv[argmax[flat]];
      }
  return tape.record(std::move(y), tape.requires_grad(x), [x, argmax = std::move(argmax)](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
  });
}

Var adaptive_avg_pool1d(Var x, std::size_t out_length) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  require_rank3(xv, "adaptive_avg_pool1d");
  const std::size_t N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  if (out_length == 0 || out_length > L) throw ShapeError("adaptive_avg_pool1d: invalid output length");
  std::vector<std::pair<std::size_t, std::size_t>> bins(out_length);
  for (std::size_t o = 0; o < out_length; ++o)
    bins[o] = {o * L / out_length, ((o + 1) * L + out_length - 1) / out_length};
  Tensor y({N, C, out_length});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t o = 0; o < out_length; ++o) {
        double s = 0.0;
        for (std::size_t l = bins[o].first; l < bins[o].second; ++l) s += xv.at(n, c, l);
        y.at(n, c, o) = s / static_cast<double>(bins[o].second - bins[o].first);
      }
  return tape.record(std::move(y), tape.requires_grad(x), [x, bins, N, C](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    const std::size_t out_length = bins.size();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t o = 0; o < out_length; ++o) {
          const double g = gy.at(n, c, o) / static_cast<double>(bins[o].second - bins[o].first);
          for (std::size_t l = bins[o].first; l < bins[o].second; ++l) gx.at(n, c, l) += g;
        }
  });
}

Var conv_transpose1d(Var x, Var weights, Var bias, std::size_t stride, std::size_t out_length) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& wv = weights.value();
  require_rank3(xv, "conv_transpose1d");
  if (wv.rank() != 3 || wv.dim(0) != xv.dim(1))
    throw ShapeError("conv_transpose1d: weights must be [C_in x C_out x K] matching input channels");
  const std::size_t N = xv.dim(0), Cin = xv.dim(1), L = xv.dim(2), Cout = wv.dim(1), K = wv.dim(2);
  require_shape(bias.value(), {Cout}, "conv_transpose1d bias");
  if (stride == 0) throw std::invalid_argument("conv_transpose1d: stride must be >= 1");
  const std::size_t full = (L - 1) * stride + K;
  if (out_length > full)
    throw ShapeError("conv_transpose1d: requested length " + std::to_string(out_length) + " exceeds " +
                     std::to_string(full));
  Tensor y({N, Cout, out_length});
  const Tensor& bv = bias.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co) {
      double* yrow = &y.at(n, co, 0);
      for (std::size_t o = 0; o < out_length; ++o) yrow[o] = bv[co];
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t l = 0; l < L; ++l) {
          const double xval = xv.at(n, ci, l);
          const double* wk = &wv.at(ci, co, 0);
          const std::size_t base = l * stride;
          const std::size_t kmax = std::min(K, out_length > base ? out_length - base : 0);
          for (std::size_t k = 0; k < kmax; ++k) yrow[base + k] += xval * wk[k];
        }
    }
  return tape.record(std::move(y), tape.any_requires_grad({x, weights, bias}),
                     [x, weights, bias, stride, out_length](Tape& t, const Tensor& gy) {
                       const Tensor& xv = t.value(x);
                       const Tensor& wv = t.value(weights);
                       const std::size_t N = xv.dim(0), Cin = xv.dim(1), L = xv.dim(2), Cout = wv.dim(1),
                                         K = wv.dim(2);
                       Tensor* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
                       Tensor* gw = t.requires_grad(weights) ? &t.grad(weights) : nullptr;
                       if (t.requires_grad(bias)) {
                         Tensor& gb = t.grad(bias);
                         for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t co = 0; co < Cout; ++co)
                             for (std::size_t o = 0; o < out_length; ++o) gb[co] += gy.at(n, co, o);
                       }
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t co = 0; co < Cout; ++co) {
                           const double* grow = &gy.at(n, co, 0);
                           for (std::size_t ci = 0; ci < Cin; ++ci)
                             for (std::size_t l = 0; l < L; ++l) {
                               const std::size_t base = l * stride;
                               const std::size_t kmax = std::min(K, out_length > base ? out_length - base : 0);
                               const double* wk = &wv.at(ci, co, 0);
                               double acc = 0.0;
                               for (std::size_t k = 0; k < kmax; ++k) acc += grow[base + k] * wk[k];
                               if (gx) gx->at(n, ci, l) += acc;
                               if (gw) {
                                 const double xval = xv.at(n, ci, l);
                                 double* gwk = &gw->at(ci, co, 0);
                                 for (std::size_t k = 0; k < kmax; ++k) gwk[k] += xval * grow[base + k];
                               }
                             }
                         }
                     });
}

Var nn_block(Var x, const BlockParams& params, const BlockSpec& spec, BatchNormState& state, bool training) {
  Var h = conv1d(x, params.kernels, spec.stride, spec.padding);
  h = batch_norm(h, params.gamma, params.beta, state, training);
  h = relu(h);
  return max_pool1d(h, spec.pool);
}

Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("flatten: scalar input");
  return reshape(x, {s[0], x.value().size() / std::max<std::size_t>(s[0], 1)});
}

Var reshape(Var x, Shape shape) {
  Tape& tape = *x.tape;
  Tensor y = x.value().reshaped(std::move(shape));
  return tape.record(std::move(y), tape.requires_grad(x), [x](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

Var concat_columns(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0))
    throw ShapeError("concat_columns: expected [N x Da] and [N x Db], got " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  const std::size_t N = av.dim(0), Da = av.dim(1), Db = bv.dim(1);
  Tensor y({N, Da + Db});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.data() + n * Da, Da, y.data() + n * (Da + Db));
    if (Db) std::copy_n(bv.data() + n * Db, Db, y.data() + n * (Da + Db) + Da);
  }
  return tape.record(std::move(y), tape.any_requires_grad({a, b}), [a, b, N, Da, Db](Tape& t, const Tensor& gy) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < Da; ++j) ga[n * Da + j] += gy[n * (Da + Db) + j];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < Db; ++j) gb[n * Db + j] += gy[n * (Da + Db) + Da + j];
    }
  });
}

Var slice_columns(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin > end || end > xv.dim(1)) throw ShapeError("slice_columns: invalid range");
  const std::size_t N = xv.dim(0), D = xv.dim(1), W = end - begin;
  Tensor y({N, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < W; ++j) y[n * W + j] = xv[n * D + begin + j];
  return tape.record(std::move(y), tape.requires_grad(x), [x, begin, N, D, W](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < W; ++j) gx[n * D + begin + j] += gy[n * W + j];
  });
}

Var add(Var a, Var b) {
  Tape& tape = *a.tape;
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor y = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(std::move(y), tape.any_requires_grad({a, b}), [a, b](Tape& t, const Tensor& gy) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor& g = t.grad(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  if (terms.empty()) throw std::invalid_argument("weighted_sum: no terms");
  Tape& tape = *terms.front().second.tape;
  double total = 0.0;
  bool needs = false;
  for (const auto& [w, v] : terms) {
    if (v.value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    total += w * v.value()[0];
    needs = needs || tape.requires_grad(v);
  }
  return tape.record(Tensor({1}, total), needs, [terms](Tape& t, const Tensor& gy) {
    for (const auto& [w, v] : terms)
      if (t.requires_grad(v)) t.grad(v)[0] += w * gy[0];
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || begin >= end || end > xv.dim(0))
    throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ") for " +
                     shape_string(xv.shape()));
  const std::size_t row = xv.size() / xv.dim(0);
  Shape shape = xv.shape();
  shape[0] = end - begin;
  Tensor y(shape);
  std::copy_n(xv.data() + begin * row, y.size(), y.data());
  return tape.record(std::move(y), tape.requires_grad(x), [x, begin, row](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[begin * row + i] += gy[i];
  });
}

Var normalize_rows(Var x, bool allow_zero) {
  Tape& tape = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("normalize_rows: expected [N x D], got " + shape_string(xv.shape()));
  const std::size_t N = xv.dim(0), D = xv.dim(1);
  Tensor y(xv.shape());
  std::vector<double> norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) s += xv.at(n, j) * xv.at(n, j);
    if (!(s > 0.0)) {
      if (!allow_zero) throw std::invalid_argument("normalize_rows: row " + std::to_string(n) + " has zero norm");
      norms[n] = 0.0;
      continue;
    }
    norms[n] = std::sqrt(s);
    for (std::size_t j = 0; j < D; ++j) y.at(n, j) = xv.at(n, j) / norms[n];
  }
  return tape.record(y, tape.requires_grad(x), [x, y, norms](Tape& t, const Tensor& gy) {
    Tensor& gx = t.grad(x);
    const std::size_t N = y.dim(0), D = y.dim(1);
    for (std::size_t n = 0; n < N; ++n) {
      if (norms[n] == 0.0) continue;
      // d(x/|x|) = (g - y (y.g)) / |x|
      double dot = 0.0;
      for (std::size_t j = 0; j < D; ++j) dot += y.at(n, j) * gy.at(n, j);
      for (std::size_t j = 0; j < D; ++j) gx.at(n, j) += (gy.at(n, j) - y.at(n, j) * dot) / norms[n];
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()));
  const std::size_t N = av.dim(0), C = bv.dim(0), D = av.dim(1);
  Tensor y({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < D; ++j) s += av.at(n, j) * bv.at(c, j);
      y.at(n, c) = s;
    }
  return tape.record(std::move(y), tape.any_requires_grad({a, b}), [a, b](Tape& t, const Tensor& gy) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t N = av.dim(0), C = bv.dim(0), D = av.dim(1);
    Tensor* ga = t.requires_grad(a) ? &t.grad(a) : nullptr;
    Tensor* gb = t.requires_grad(b) ? &t.grad(b) : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double g = gy.at(n, c);
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < D; ++j) {
          if (ga) ga->at(n, j) += g * bv.at(c, j);
          if (gb) gb->at(c, j) += g * av.at(n, j);
        }
      }
  });
}

}  // namespace tsda::nn
