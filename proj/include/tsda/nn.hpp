#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "tsda/autograd.hpp"
#include "tsda/tensor.hpp"

namespace tsda::nn {

std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Cross-correlation of one sample: input [C_in x L], kernels [C_out x C_in x K].
Tensor conv1d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);

/// Non-overlapping max-pool of one sample [C x L]; the tail shorter than
/// `window` is dropped.
Tensor max_pool1d(const Tensor& input, std::size_t window);

/// Running statistics of one normalization layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

struct BlockSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 5;
  std::size_t stride = 1;
  std::size_t padding = 2;
  std::size_t pool = 2;
};

struct BlockParams {
  Var kernels;  // [out x in x kernel]
  Var gamma;    // [out]
  Var beta;     // [out]
};

// Batched tape operations. Series batches are [N x C x L]; feature batches [N x D].

Var conv1d(Var x, Var kernels, std::size_t stride, std::size_t padding);
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training);
Var relu(Var x);
Var max_pool1d(Var x, std::size_t window);
Var adaptive_avg_pool1d(Var x, std::size_t out_length);

/// Transposed convolution [N x C_in x L] -> [N x C_out x out_length] with
/// weights [C_in x C_out x K] and per-channel bias; the full output of length
/// (L-1)*stride + K is cropped to `out_length`.
Var conv_transpose1d(Var x, Var weights, Var bias, std::size_t stride, std::size_t out_length);

/// conv1d -> batch_norm -> relu -> max_pool1d.
Var nn_block(Var x, const BlockParams& params, const BlockSpec& spec, BatchNormState& state, bool training);

Var flatten(Var x);
Var concat_columns(Var a, Var b);
Var slice_columns(Var x, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);
/// Rows [begin, end) along the first axis of any-rank input.
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var add(Var a, Var b);

/// Rows scaled to unit Euclidean norm. A zero row throws unless
/// `allow_zero`, in which case it stays zero and passes no gradient.
Var normalize_rows(Var x, bool allow_zero = false);

/// a [N x D] times b^T for b [C x D] -> [N x C].
Var matmul_nt(Var a, Var b);

/// Sum of weighted scalar terms.
Var weighted_sum(const std::vector<std::pair<double, Var>>& terms);

}  // namespace tsda::nn
