#pragma once

#include <functional>

#include "recguard/rng.hpp"
#include "recguard/tensor.hpp"

namespace recguard::testutil {

// Central finite differences against an analytic gradient at sampled
// coordinates. Relative error uses a scale floor so coordinates whose true
// gradient is numerically zero don't divide by noise.
struct GradCheck {
  int coords = 20;
  float h = 5e-3f;
  float tol = 1e-3f;

  // returns worst relative error over the sampled coordinates
  double run(const std::function<double(const Tensor&)>& f, const Tensor& x,
             const Tensor& analytic, Rng& rng) const {
    float gmax = analytic.max_abs();
    float floor = 1e-3f * (1.0f + gmax);
    double worst = 0.0;
    Tensor probe = x;
    for (int s = 0; s < coords; ++s) {
      std::size_t c = rng.below(x.numel());
      float orig = probe[c];
      probe[c] = orig + h;
      double fp = f(probe);
      probe[c] = orig - h;
      double fm = f(probe);
      probe[c] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double ga = analytic[c];
      double denom = std::max({std::abs(ga), std::abs(fd), static_cast<double>(floor)});
      worst = std::max(worst, std::abs(ga - fd) / denom);
    }
    return worst;
  }
};

}  // namespace recguard::testutil
