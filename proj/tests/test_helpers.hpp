#pragma once

#include <doctest.h>

#include <functional>

#include "apgn/autodiff.hpp"
#include "apgn/mat.hpp"

namespace apgn::testing {

inline MatD random_mat(int rows, int cols, DetRng& rng, double scale = 1.0) {
  MatD m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
  return m;
}

// Central finite differences on every entry of `param` against the analytic
// gradient of the scalar built by `build`.
inline void check_grad_full(
    MatD param, const std::function<Var<double>(Tape<double>&, Var<double>)>& build,
    double tol = 1e-6, double step = 1e-6) {
  MatD p = param;
  MatD analytic;
  {
    Tape<double> tape;
    Var<double> leaf = tape.leaf(&p);
    Var<double> loss = build(tape, leaf);
    REQUIRE(tape.val(loss).size() == 1);
    tape.backward(loss);
    analytic = tape.grad_of(leaf);
  }
  auto eval = [&]() {
    Tape<double> tape;
    Var<double> leaf = tape.leaf(&p);
    return scalar_value(build(tape, leaf));
  };
  for (int r = 0; r < p.rows(); ++r)
    for (int c = 0; c < p.cols(); ++c) {
      double keep = p(r, c);
      p(r, c) = keep + step;
      double up = eval();
      p(r, c) = keep - step;
      double down = eval();
      p(r, c) = keep;
      double fd = (up - down) / (2 * step);
      double denom = std::max({1.0, std::abs(fd), std::abs(analytic(r, c))});
      CHECK(std::abs(fd - analytic(r, c)) / denom < tol);
    }
}

}  // namespace apgn::testing
