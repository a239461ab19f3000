#include "fsad/optim.hpp"

#include <cmath>

namespace fsad {

Adam::Adam(std::vector<ag::Var> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    Tensor& w = params_[i].mutable_value();
    const Tensor& g = params_[i].node()->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = g[j] + options_.weight_decay * w[j];
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * grad;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * grad * grad;
      w[j] -= options_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
    }
  }
}

double step_decay(double base_lr, int epoch, int step_size, double gamma) {
  if (step_size <= 0) return base_lr;
  return base_lr * std::pow(gamma, epoch / step_size);
}

}  // namespace fsad
