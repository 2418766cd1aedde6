#pragma once

// Scalar reference for Nesterov momentum on f(w) = curvature / 2 * (w - target)^2.

#include <vector>

#include "distillforge/pipeline.hpp"

namespace distillforge::testing {

struct QuadraticRun {
  std::vector<double> reference;
  std::vector<double> optimizer;
};

inline QuadraticRun nag_on_quadratic(double w0, double curvature, double target, double lr,
                                     double momentum, int steps) {
  QuadraticRun run;
  double w = w0, v = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double g = curvature * (w - target);
    v = momentum * v - lr * g;
    w = w + momentum * v - lr * g;
    run.reference.push_back(w);
  }

  Tensor param = Tensor::scalar(w0, true);
  std::vector<Tensor> params{param};
  OptimizerState opt;
  opt.learning_rate = lr;
  opt.momentum = momentum;
  for (int i = 0; i < steps; ++i) {
    const auto diff = add_scalar(params[0], -target);
    backward(scale(sum(square(diff)), 0.5 * curvature));
    nag_step(params, opt);
    run.optimizer.push_back(params[0].item());
  }
  return run;
}

}  // namespace distillforge::testing
