// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "normlab/tensor.hpp"

namespace normlab {

// Largest per-coordinate relative error between the tape gradient of f at x
// and a central difference with the given step:
//   |a - cd| / (|a| + |cd| + 1e-12)
// f must return a one-element tensor. x is left unchanged.
template <class F>
double grad_check(F&& f, const Tensor<double>& x, double step = 1e-6) {
  if (!(step > 0)) throw ConfigError("grad_check: step must be > 0");
  Tensor<double> leaf = x.clone(true);
  std::vector<double> analytic;
  {
    Tape<double> tape;
    Tensor<double> y = f(tape, leaf);
    if (y.size() != 1) throw ShapeError("grad_check: f must be scalar-valued, got " + to_string(y.shape()));
    tape.backward(y);
    auto g = leaf.grad();
    analytic.assign(g.begin(), g.end());
  }
  auto eval = [&](const Tensor<double>& at) {
    Tape<double> tape(false);
    return f(tape, at).item();
  };
  double worst = 0;
  Tensor<double> probe = x.clone(false);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe.data()[i];
    probe.data()[i] = x0 + step;
    const double fp = eval(probe);
    probe.data()[i] = x0 - step;
    const double fm = eval(probe);
    probe.data()[i] = x0;
    const double cd = (fp - fm) / (2 * step);
    const double err = std::abs(analytic[i] - cd) / (std::abs(analytic[i]) + std::abs(cd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace normlab
