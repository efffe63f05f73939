#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tsda/tensor.hpp"

namespace tsda {

struct Parameter {
  Tensor value;
  Tensor grad;
};

/// Named trainable tensors with gradients of matching shape. Iteration order
/// is lexicographic by name, which keeps optimizer updates and checkpoint
/// layout deterministic.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  std::vector<std::string> names() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over every parameter accepted by `select`
/// (all parameters when `select` is empty). Gradients are left untouched.
/// Throws std::runtime_error naming the parameter when a gradient is not finite.
void adam_step(ParameterSet& params, OptimizerState& state,
               const std::function<bool(const std::string&)>& select = {});

/// Scalar objective over a parameter set. When `with_grad` is true the
/// function must also leave d(objective)/d(parameter) in each `grad`.
using Objective = std::function<double(ParameterSet&, bool with_grad)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares analytic gradients against central differences with step `h`.
/// The error metric is |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(const Objective& f, ParameterSet& params, double h);

}  // namespace tsda
