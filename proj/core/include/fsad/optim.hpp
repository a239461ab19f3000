#pragma once

#include <vector>

#include "fsad/autograd.hpp"

namespace fsad {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty folded into the gradient.
  double weight_decay = 0.0;
};

/// Adam over a fixed list of parameter handles.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamOptions options);

  void zero_grad();
  /// Applies one update from the accumulated gradients.
  void step();

  double learning_rate() const { return options_.learning_rate; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Tensor> m_, v_;
  AdamOptions options_;
  long steps_ = 0;
};

/// Learning rate multiplied by `gamma` every `step_size` epochs.
double step_decay(double base_lr, int epoch, int step_size, double gamma);

}  // namespace fsad
