#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "zapnet/errors.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t index = 0;
  friend bool operator==(Var, Var) = default;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// the node list is always topologically sorted and backward is a single
// reverse sweep.
template <typename T>
class Tape {
 public:
  // Receives the node's output value and output gradient; accumulates into
  // input gradients through Tape::grad().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&, const std::vector<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a parameter. Registering the same tensor twice yields the
  /// same Var, so path gradients accumulate.
  Var param(Tensor<T>& p) {
    if (auto it = param_index_.find(&p); it != param_index_.end()) return Var{it->second};
    Node n;
    n.op = "param";
    n.ref = &p;
    n.param = &p;
    n.requires_grad = p.requires_grad();
    nodes_.push_back(std::move(n));
    param_index_.emplace(&p, nodes_.size() - 1);
    return Var{nodes_.size() - 1};
  }

  /// Non-owning view of a tensor that never receives gradient.
  Var input(const Tensor<T>& t) {
    Node n;
    n.op = "input";
    n.ref = &t;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor<T> t) {
    Node n;
    n.op = "constant";
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var record(std::string op, Tensor<T> value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericalError("non-finite value produced by forward op '" + op + "'");
    }
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (Var v : inputs) n.requires_grad = n.requires_grad || nodes_.at(v.index).requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.index);
    return n.ref ? *n.ref : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }
  const std::string& op(Var v) const { return nodes_.at(v.index).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated (zeroed) on first access.
  std::vector<T>& grad(Var v) {
    Node& n = nodes_.at(v.index);
    if (n.grad.empty()) n.grad.assign(value(v).numel(), T{0});
    return n.grad;
  }

  /// Runs the reverse sweep from a scalar loss and writes gradients into the
  /// grad slot of every registered parameter that requires grad. Parameters
  /// the loss does not depend on receive zeros.
  void backward(Var loss) {
    if (value(loss).numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(shape(loss)));
    }
    for (auto& n : nodes_) n.grad.clear();
    if (requires_grad(loss)) grad(loss)[0] = T{1};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      T probe{0};
      for (T g : n.grad) probe += g - g;
      if (probe != T{0}) {
        throw NumericalError("non-finite gradient reaching op '" + n.op + "' (node " +
                             std::to_string(i) + ")");
      }
      // nodes_ is never resized during the sweep, so n.grad stays valid.
      n.backward(*this, n.value, n.grad);
    }
    for (auto& n : nodes_) {
      if (!n.param || !n.requires_grad) continue;
      std::vector<T> g = n.grad.empty() ? std::vector<T>(n.param->numel(), T{0}) : n.grad;
      for (T x : g) {
        if (!std::isfinite(x)) throw NumericalError("non-finite parameter gradient");
      }
      n.param->set_grad(std::move(g));
    }
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> param_index_;
};

// Elementwise helpers. The network itself only needs the layer ops in
// layers.hpp; these exist for composing small test functions.

template <typename T>
Var scale(Tape<T>& tape, Var x, T c) {
  Tensor<T> out = tape.value(x);
  for (auto& v : out.data()) v *= c;
  return tape.record("scale", std::move(out), {x}, [x, c](Tape<T>& t, const Tensor<T>&, const std::vector<T>& g) {
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

template <typename T>
Var square(Tape<T>& tape, Var x) {
  Tensor<T> out = tape.value(x);
  for (auto& v : out.data()) v *= v;
  return tape.record("square", std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>&, const std::vector<T>& g) {
    const auto xv = t.value(x).data();
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += T{2} * xv[i] * g[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  if (tape.shape(a) != tape.shape(b)) {
    throw ShapeError("add: shape mismatch " + shape_str(tape.shape(a)) + " vs " +
                     shape_str(tape.shape(b)));
  }
  Tensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  return tape.record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const std::vector<T>& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  if (tape.shape(a) != tape.shape(b)) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = tape.value(a);
  const auto bv = tape.value(b).data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  return tape.record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>&, const std::vector<T>& g) {
    const auto av = t.value(a).data();
    const auto bv = t.value(b).data();
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += bv[i] * g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += av[i] * g[i];
    }
  });
}

/// Sum of all elements, accumulated sequentially in index order.
template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T acc{0};
  for (T v : tape.value(x).data()) acc += v;
  return tape.record("sum", Tensor<T>::scalar(acc), {x},
                     [x](Tape<T>& t, const Tensor<T>&, const std::vector<T>& g) {
                       for (auto& v : t.grad(x)) v += g[0];
                     });
}

/// Central-difference gradient of a scalar function, evaluated in double
/// precision: (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i.
template <typename T, typename F>
Tensor<double> finite_difference_grad(F&& f, const Tensor<T>& x, double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  Tensor<double> probe = x.template cast<double>();
  Tensor<double> out(x.shape());
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double plus = static_cast<double>(f(probe));
    probe[i] = saved - h;
    const double minus = static_cast<double>(f(probe));
    probe[i] = saved;
    out[i] = (plus - minus) / (2.0 * h);
  }
  return out;
}

}  // namespace zapnet
