#include "tsda/parameters.hpp"

#include <cmath>
#include <stdexcept>

namespace tsda {

Parameter& ParameterSet::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor grad(init.shape());
  auto [it, _] = params_.emplace(name, Parameter{std::move(init), std::move(grad)});
  return it->second;
}

Parameter& ParameterSet::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

void adam_step(ParameterSet& params, OptimizerState& state,
               const std::function<bool(const std::string&)>& select) {
  for (const auto& [name, p] : params) {
    if (select && !select(name)) continue;
    if (p.grad.shape() != p.value.shape())
      throw std::runtime_error("gradient shape mismatch for parameter " + name);
    if (!p.grad.all_finite()) throw std::runtime_error("non-finite gradient in parameter " + name);
  }

  ++state.step;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);

  for (auto& [name, p] : params) {
    if (select && !select(name)) continue;
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.shape() != p.value.shape()) m = Tensor(p.value.shape());
    if (v.shape() != p.value.shape()) v = Tensor(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p.value[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

GradCheckReport grad_check(const Objective& f, ParameterSet& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step h must be positive");
  params.zero_grad();
  const double f0 = f(params, true);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: objective is not finite");

  std::map<std::string, Tensor> analytic;
  for (const auto& [name, p] : params) analytic.emplace(name, p.grad);

  GradCheckReport report;
  for (auto& [name, p] : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double fp = f(params, false);
      p.value[i] = saved - h;
      const double fm = f(params, false);
      p.value[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: objective not finite near " + name);
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.at(name)[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > report.max_rel_error || report.worst_parameter.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          report.worst_parameter = name;
          report.worst_index = i;
          report.analytic = a;
          report.numeric = numeric;
        }
      }
    }
  }
  for (auto& [name, p] : params) p.grad = analytic.at(name);
  return report;
}

}  // namespace tsda
