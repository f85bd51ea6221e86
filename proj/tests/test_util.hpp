#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "zapnet/zapnet.hpp"

namespace zt {

using namespace zapnet;

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Gradient of sum(r * op(x)) with respect to x, by backprop in precision T.
template <typename T, typename Op>
std::vector<double> backprop_grad(Op op, const Tensor<double>& x, const Tensor<double>& r) {
  Tape<T> tape;
  Tensor<T> xt = x.template cast<T>();
  xt.set_requires_grad(true);
  Var y = op(tape, tape.param(xt));
  Var loss = sum(tape, mul(tape, y, tape.constant(r.template cast<T>())));
  tape.backward(loss);
  return std::vector<double>(xt.grad().begin(), xt.grad().end());
}

// The same function in double precision, for the finite-difference oracle.
template <typename Op>
double forward_value(Op op, const Tensor<double>& x, const Tensor<double>& r) {
  Tape<double> tape;
  Var y = op(tape, tape.constant(x));
  Var loss = sum(tape, mul(tape, y, tape.constant(r)));
  return tape.value(loss)[0];
}

inline double max_rel_error(const std::vector<double>& a, const Tensor<double>& n, double floor) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, relative_error(a[i], n[i], floor));
  return worst;
}

// Compares backprop against central differences for one operand.
template <typename T, typename Op>
double layer_grad_error(Op op, const Tensor<double>& x, Shape out_shape, std::uint64_t seed, double h,
                        double floor) {
  Rng rng(seed);
  const Tensor<double> r = random_tensor(std::move(out_shape), rng);
  const auto analytic = backprop_grad<T>(op, x, r);
  const auto numeric = finite_difference_grad([&](const Tensor<double>& p) { return forward_value(op, p, r); }, x, h);
  return max_rel_error(analytic, numeric, floor);
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("zapnet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) { return detail::read_file(p); }

}  // namespace zt
