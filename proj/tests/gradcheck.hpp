#pragma once

// Central finite differences as an independent oracle for every backward
// implementation. The graph is rebuilt per evaluation, so the function under
// test must recompute from the perturbed leaf.

#include <functional>

#include <catch2/catch_amalgamated.hpp>

#include "tokedit/tensor.hpp"

namespace tokedit::testing {

inline void gradcheck(Tensor leaf, const std::function<Tensor()>& f, float eps = 1e-2f,
                      double rtol = 5e-2, double atol = 5e-3) {
  leaf.zero_grad();
  Tensor y = f();
  REQUIRE(y.numel() == 1);
  y.backward();
  std::vector<float> analytic = leaf.grad();
  REQUIRE(analytic.size() == leaf.numel());

  for (size_t i = 0; i < leaf.numel(); i++) {
    float orig = leaf.data()[i];
    leaf.data()[i] = orig + eps;
    double fp = f().scalar();
    leaf.data()[i] = orig - eps;
    double fm = f().scalar();
    leaf.data()[i] = orig;
    double numeric = (fp - fm) / (2.0 * eps);
    double tol = atol + rtol * std::max(std::abs(numeric), std::abs((double)analytic[i]));
    INFO("element " << i << ": analytic " << analytic[i] << " vs numeric " << numeric);
    REQUIRE(std::abs(analytic[i] - numeric) <= tol);
  }
}

}  // namespace tokedit::testing
