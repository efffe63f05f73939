#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tsda/autograd.hpp"
#include "tsda/parameters.hpp"
#include "tsda/tensor.hpp"

namespace testing {

inline tsda::Tensor randn(const tsda::Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  tsda::Tensor t(shape);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// <x, r> for a fixed r; turns any op output into a scalar whose gradient is r.
inline tsda::Var dot_const(tsda::Var x, const tsda::Tensor& r) {
  tsda::Tape& tape = *x.tape;
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += x.value()[i] * r[i];
  return tape.record(tsda::Tensor({1}, s), tape.requires_grad(x), [x, r](tsda::Tape& t, const tsda::Tensor& g) {
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < r.size(); ++i) gx[i] += g[0] * r[i];
  });
}

using Builder = std::function<tsda::Var(tsda::Tape&, std::vector<tsda::Var>&)>;

// Wraps `inputs` as parameters named in0, in1, ... and checks the gradient of
// <build(inputs), r> against central differences.
inline tsda::GradCheckReport check_op(const std::vector<tsda::Tensor>& inputs, const Builder& build,
                                      std::uint64_t seed = 99, double h = 1e-6) {
  tsda::ParameterSet params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.add("in" + std::to_string(i), inputs[i]);
  tsda::Tensor probe;
  auto f = [&](tsda::ParameterSet& ps, bool with_grad) {
    tsda::Tape tape;
    std::vector<tsda::Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(ps.get("in" + std::to_string(i))));
    tsda::Var out = build(tape, vars);
    if (probe.empty()) probe = randn(out.shape(), seed);
    tsda::Var s = dot_const(out, probe);
    if (with_grad) {
      ps.zero_grad();
      tape.backward(s);
    }
    return s.value()[0];
  };
  return tsda::grad_check(f, params, h);
}

}  // namespace testing
