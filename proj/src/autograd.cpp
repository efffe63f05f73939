#include "tsda/autograd.hpp"

#include <stdexcept>

namespace tsda {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, {}, &p});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad, requires_grad ? std::move(backward) : Backward{},
                        nullptr});
  return Var{this, nodes_.size() - 1};
}

bool Tape::any_requires_grad(std::initializer_list<Var> vars) const {
  for (const auto& v : vars)
    if (nodes_[v.id].requires_grad) return true;
  return false;
}

Tensor& Tape::grad(Var v) {
  auto& node = nodes_[v.id];
  if (node.grad.shape() != node.value.shape()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Tape::backward(Var root) {
  if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  grad(root)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.parameter) {
      auto& g = node.parameter->grad;
      if (g.shape() != node.value.shape()) g = Tensor(node.value.shape());
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += node.grad[k];
    } else if (node.backward) {
      // Closures only write to earlier nodes and never grow the tape, so the
      // reference stays valid.
      node.backward(*this, node.grad);
    }
  }
}

}  // namespace tsda
