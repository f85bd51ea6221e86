#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "zapnet/errors.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.001;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Keep moment buffers of zapped/resized parameters instead of zeroing them.
  bool keep_state = false;

  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

// One buffer per parameter, in the order the parameters are passed to step.
// Buffers are created lazily (zero-filled) on the first step that touches them.
template <typename T>
struct SgdState {
  double lr = 0.01;
  double momentum = 0.9;
  std::vector<std::vector<T>> b;

  friend bool operator==(const SgdState&, const SgdState&) = default;
};

template <typename T>
struct AdamState {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

namespace detail {

template <typename T>
std::vector<T>& buffer_for(std::vector<std::vector<T>>& bufs, std::size_t i, std::size_t n) {
  if (bufs.size() <= i) bufs.resize(i + 1);
  if (bufs[i].empty()) bufs[i].assign(n, T{0});
  if (bufs[i].size() != n) {
    throw ShapeError("optimizer buffer " + std::to_string(i) + " has " +
                     std::to_string(bufs[i].size()) + " entries, parameter has " +
                     std::to_string(n));
  }
  return bufs[i];
}

template <typename T>
bool trainable(const Tensor<T>* p) {
  return p->requires_grad() && p->has_grad();
}

}  // namespace detail

/// b <- mu * b + g;  theta <- theta - lr * b
template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, SgdState<T>& state) {
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>* p = params[i];
    if (!detail::trainable(p)) continue;
    auto& b = detail::buffer_for(state.b, i, p->numel());
    const auto g = p->grad();
    auto th = p->data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      b[j] = mu * b[j] + g[j];
      th[j] -= lr * b[j];
    }
  }
}

// m <- lerp(g, m, beta1); v <- lerp(g^2, v, beta2), with lerp(a, b, w) = (1-w)a + wb;
// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps). The step counter is
// shared by all parameters and incremented before bias correction.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state) {
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T one_minus_b1 = static_cast<T>(1.0 - state.beta1);
  const T one_minus_b2 = static_cast<T>(1.0 - state.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(state.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(state.beta2, t));
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>* p = params[i];
    if (!detail::trainable(p)) continue;
    auto& m = detail::buffer_for(state.m, i, p->numel());
    auto& v = detail::buffer_for(state.v, i, p->numel());
    const auto g = p->grad();
    auto th = p->data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      m[j] = one_minus_b1 * g[j] + b1 * m[j];
      v[j] = one_minus_b2 * g[j] * g[j] + b2 * v[j];
      const T m_hat = m[j] / bc1;
      const T v_hat = v[j] / bc2;
      th[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

/// Whole parameter (row unset) or one leading-dimension row of it.
struct ParamSlice {
  std::size_t param = 0;
  std::optional<std::size_t> row;
};

namespace detail {

template <typename T>
void zero_slice(std::vector<std::vector<T>>& bufs, const Tensor<T>& p, const ParamSlice& s) {
  if (s.param >= bufs.size() || bufs[s.param].empty()) return;  // never stepped: already zero
  auto& b = bufs[s.param];
  if (!s.row) {
    // Drop the buffer; it is recreated zero-filled with the parameter's
    // current shape on the next step.
    b.clear();
    return;
  }
  if (b.size() != p.numel()) {
    throw ShapeError("optimizer buffer no longer matches parameter " + std::to_string(s.param));
  }
  const std::size_t width = p.numel() / p.dim(0);
  std::fill(b.begin() + static_cast<std::ptrdiff_t>(*s.row * width),
            b.begin() + static_cast<std::ptrdiff_t>((*s.row + 1) * width), T{0});
}

template <typename T>
void check_slices(std::span<Tensor<T>* const> params, std::span<const ParamSlice> slices) {
  for (const auto& s : slices) {
    if (s.param >= params.size()) {
      throw ShapeError("unknown parameter slice: index " + std::to_string(s.param));
    }
    if (s.row && *s.row >= params[s.param]->dim(0)) {
      throw ShapeError("unknown parameter slice: row " + std::to_string(*s.row) + " of parameter " +
                       std::to_string(s.param));
    }
  }
}

}  // namespace detail

/// Zeroes the optimizer buffers of the given slices; the Adam step counter is
/// left unchanged.
template <typename T>
void reset_state_for(std::span<Tensor<T>* const> params, std::span<const ParamSlice> slices,
                     SgdState<T>& state) {
  detail::check_slices(params, slices);
  for (const auto& s : slices) detail::zero_slice(state.b, *params[s.param], s);
}

template <typename T>
void reset_state_for(std::span<Tensor<T>* const> params, std::span<const ParamSlice> slices,
                     AdamState<T>& state) {
  detail::check_slices(params, slices);
  for (const auto& s : slices) {
    detail::zero_slice(state.m, *params[s.param], s);
    detail::zero_slice(state.v, *params[s.param], s);
  }
}

// Type-erased optimizer selected by an OptimizerSpec.
template <typename T>
class Optimizer {
 public:
  using State = std::variant<SgdState<T>, AdamState<T>>;

  explicit Optimizer(const OptimizerSpec& spec) : spec_(spec) {
    if (!(spec.lr >= 0.0) || !std::isfinite(spec.lr)) throw ConfigError("learning rate must be >= 0");
    if (spec.kind == OptimizerKind::sgd) {
      state_ = SgdState<T>{spec.lr, spec.momentum, {}};
    } else {
      AdamState<T> s;
      s.lr = spec.lr;
      s.beta1 = spec.beta1;
      s.beta2 = spec.beta2;
      s.eps = spec.eps;
      state_ = std::move(s);
    }
  }

  Optimizer(const OptimizerSpec& spec, State state) : spec_(spec), state_(std::move(state)) {}

  const OptimizerSpec& spec() const noexcept { return spec_; }
  const State& state() const noexcept { return state_; }
  State& state() noexcept { return state_; }

  void step(std::span<Tensor<T>* const> params) {
    std::visit(
        [&](auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, SgdState<T>>) {
            sgd_step(params, s);
          } else {
            adam_step(params, s);
          }
        },
        state_);
  }

  /// Applies the zap policy: zero the buffers unless keep_state is set.
  /// Whole-tensor resets always apply when the parameter changed shape.
  void on_resampled(std::span<Tensor<T>* const> params, std::span<const ParamSlice> slices) {
    std::visit(
        [&](auto& s) {
          if (!spec_.keep_state) {
            reset_state_for(params, slices, s);
            return;
          }
          std::vector<ParamSlice> reshaped;
          for (const auto& sl : slices) {
            if (!buffers_match(params, sl.param)) reshaped.push_back({sl.param, std::nullopt});
          }
          reset_state_for(params, std::span<const ParamSlice>(reshaped), s);
        },
        state_);
  }

  friend bool operator==(const Optimizer& a, const Optimizer& b) {
    return a.spec_ == b.spec_ && a.state_ == b.state_;
  }

 private:
  bool buffers_match(std::span<Tensor<T>* const> params, std::size_t i) const {
    return std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          const std::vector<std::vector<T>>* bufs;
          if constexpr (std::is_same_v<S, SgdState<T>>) {
            bufs = &s.b;
          } else {
            bufs = &s.m;
          }
          return i >= bufs->size() || (*bufs)[i].empty() || (*bufs)[i].size() == params[i]->numel();
        },
        state_);
  }

  OptimizerSpec spec_;
  State state_;
};

}  // namespace zapnet
