#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zapnet/autograd.hpp"
#include "zapnet/layers.hpp"
#include "zapnet/model.hpp"
#include "zapnet/random.hpp"

namespace zapnet {

struct GradcheckOptions {
  std::size_t channels = 8;
  std::size_t classes = 2;
  std::size_t batch = 2;
  std::size_t image_size = 28;
  double h = 1e-3;
  double tolerance = 1e-5;
  // Gradients smaller than this are compared in absolute terms: the
  // difference quotient itself carries roundoff of order eps * |f| / h.
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  bool passed = false;
  // Plain central differences of the network loss.
  double max_rel_error = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Diagnostics: coordinates whose +-h step flips a ReLU mask or max-pool
  // selection, and the error when those choices are held at the unperturbed
  // point (which removes kink crossings but not curvature).
  std::size_t pattern_switches = 0;
  double max_rel_error_frozen = 0;
};

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 0) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return scale == 0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

namespace detail {

// ReLU masks and max-pool selections of one forward pass.
struct ActivationPattern {
  std::vector<std::vector<char>> relu;
  std::vector<std::vector<std::size_t>> pool;
  friend bool operator==(const ActivationPattern&, const ActivationPattern&) = default;
};

// Mean cross-entropy of the model, with the piecewise-linear choices either
// recorded into `pattern` or replayed from `frozen`.
inline double patterned_loss(const ConvNet<double>& model, const Tensor<double>& x,
                             std::span<const std::size_t> labels, ActivationPattern* pattern,
                             const ActivationPattern* frozen) {
  Tape<double> tape;
  const auto& d = model.dims();
  Var h = tape.input(x);
  const auto layers = model.layers();
  for (std::size_t block = 0; block < 3; ++block) {
    const Layer<double>& l = *layers[block];
    h = conv2d(tape, h, tape.input(l.weight), tape.input(l.bias), d.stride, d.padding);
    h = instance_norm(tape, h, d.norm_eps);
    Tensor<double> v = tape.value(h);
    std::vector<char> mask(v.numel());
    for (std::size_t i = 0; i < v.numel(); ++i) mask[i] = v[i] > 0;
    if (pattern) pattern->relu.push_back(mask);
    const auto& use = frozen ? frozen->relu.at(block) : mask;
    for (std::size_t i = 0; i < v.numel(); ++i)
      if (!use[i]) v[i] = 0;
    if (block < 2) {
      const auto& s = v.shape();
      const std::size_t planes = s[0] * s[1], hh = s[2], ww = s[3], oh = hh / 2, ow = ww / 2;
      Tensor<double> out(Shape{s[0], s[1], oh, ow});
      std::vector<std::size_t> pick(out.numel());
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t i0 = p * hh * ww + (2 * oy) * ww + 2 * ox;
            std::size_t best = i0;
            for (std::size_t c : {i0 + 1, i0 + ww, i0 + ww + 1})
              if (v[c] > v[best]) best = c;
            pick[(p * oh + oy) * ow + ox] = best;
          }
      if (pattern) pattern->pool.push_back(pick);
      const auto& sel = frozen ? frozen->pool.at(block) : pick;
      for (std::size_t o = 0; o < out.numel(); ++o) out[o] = v[sel[o]];
      v = std::move(out);
    }
    h = tape.constant(std::move(v));
  }
  h = flatten(tape, h);
  Var z = linear(tape, h, tape.input(model.fc().weight), tape.input(model.fc().bias));
  const auto rows = cross_entropy_rows(tape.value(z), labels);
  double total = 0;
  for (double r : rows) total += r;
  return total / static_cast<double>(rows.size());
}

}  // namespace detail

/// Compares backprop gradients of the mean cross-entropy of a small 64-bit
/// model with central differences, for every parameter.
inline GradcheckReport gradient_check(const GradcheckOptions& o) {
  ConvNet<double> model = init_model<double>(o.channels, o.image_size, o.image_size, 1, o.classes,
                                             derive_seed(o.seed, Stream::model_init));
  Rng rng(derive_seed(o.seed, Stream::synthetic));
  Tensor<double> x(Shape{o.batch, 1, o.image_size, o.image_size});
  for (auto& v : x.data()) v = rng.uniform();
  std::vector<std::size_t> labels(o.batch);
  for (std::size_t i = 0; i < o.batch; ++i) labels[i] = i % o.classes;
  for (auto* l : model.layers())
    for (auto& b : l->bias.data()) b = rng.uniform(-0.1, 0.1);

  Tape<double> tape;
  Var loss = cross_entropy(tape, model.forward(tape, tape.input(x)), std::span<const std::size_t>(labels));
  tape.backward(loss);

  const std::span<const std::size_t> labs(labels);
  detail::ActivationPattern base;
  detail::patterned_loss(model, x, labs, &base, nullptr);

  GradcheckReport rep;
  const auto names = ConvNet<double>::parameter_names();
  auto params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& t = *params[p];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      detail::ActivationPattern plus_pattern, minus_pattern;
      t[i] = saved + o.h;
      const double plus = detail::patterned_loss(model, x, labs, nullptr, &base);
      const double plus_free = detail::patterned_loss(model, x, labs, &plus_pattern, nullptr);
      t[i] = saved - o.h;
      const double minus = detail::patterned_loss(model, x, labs, nullptr, &base);
      const double minus_free = detail::patterned_loss(model, x, labs, &minus_pattern, nullptr);
      t[i] = saved;
      if (!(plus_pattern == base) || !(minus_pattern == base)) ++rep.pattern_switches;

      const double rel = relative_error(analytic[i], (plus_free - minus_free) / (2 * o.h), o.abs_floor);
      const double rel_frozen = relative_error(analytic[i], (plus - minus) / (2 * o.h), o.abs_floor);
      rep.max_rel_error_frozen = std::max(rep.max_rel_error_frozen, rel_frozen);
      if (rep.checked == 0 || rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_parameter = names[p];
        rep.worst_index = i;
      }
      ++rep.checked;
    }
  }
  rep.passed = rep.max_rel_error < o.tolerance;
  return rep;
}

}  // namespace zapnet
