#include "t2r/optim.h"

#include <cmath>

#include "t2r/errors.h"

namespace t2r {

void AdamStep(std::span<double> param, std::span<const double> grad, AdamMoments& state,
              double lr, const AdamHyper& hyper, const std::string& name) {
  if (!(lr > 0.0)) throw ContractError("adam: learning rate must be positive");
  if (grad.size() != param.size()) {
    throw DimensionError("adam: gradient of " + name + " has " + std::to_string(grad.size()) +
                         " elements, parameter has " + std::to_string(param.size()));
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw DivergenceError("adam: non-finite gradient in parameter '" + name + "' at element " +
                                std::to_string(i),
                            state.step);
    }
  }
  if (state.first.empty()) {
    state.first.assign(param.size(), 0.0);
    state.second.assign(param.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.first[i] = hyper.beta1 * state.first[i] + (1.0 - hyper.beta1) * grad[i];
    state.second[i] = hyper.beta2 * state.second[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
    const double m_hat = state.first[i] / c1;
    const double v_hat = state.second[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

Adam::Adam(std::vector<NamedTensor> params, AdamHyper hyper)
    : params_(std::move(params)), moments_(params_.size()), hyper_(hyper) {}

void Adam::Step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.has_grad()) t.mutable_grad();
    AdamStep(t.mutable_data(), t.grad(), moments_[i], lr, hyper_, params_[i].name);
  }
  ++steps_;
}

void Adam::ZeroGrad() {
  for (auto& p : params_) p.tensor.ZeroGrad();
}

double Adam::ClipGradNorm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace t2r
