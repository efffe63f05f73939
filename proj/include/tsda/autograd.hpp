#pragma once

#include <functional>
#include <vector>

#include "tsda/parameters.hpp"
#include "tsda/tensor.hpp"

namespace tsda {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recording of the operations this library composes. Each op
/// pushes its output together with a closure that maps the output gradient
/// onto its inputs; `backward` replays the closures in reverse order and
/// accumulates leaf gradients into their Parameters.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  Var parameter(Parameter& p);
  Var record(Tensor value, bool requires_grad, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool any_requires_grad(std::initializer_list<Var> vars) const;

  /// Gradient buffer of `v`, zero-initialized on first access.
  Tensor& grad(Var v);

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* parameter = nullptr;
  };
  std::vector<Node> nodes_;
};

}  // namespace tsda
