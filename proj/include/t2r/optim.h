#pragma once

#include <span>
#include <string>
#include <vector>

#include "t2r/tensor.h"

namespace t2r {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
  long step = 0;
};

// One bias-corrected Adam update of `param` in place. A non-finite gradient
// throws DivergenceError naming `name`; nothing is modified in that case.
void AdamStep(std::span<double> param, std::span<const double> grad, AdamMoments& state,
              double lr, const AdamHyper& hyper, const std::string& name);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Adam over a fixed parameter list. Parameters that received no gradient in
// the last backward pass are updated with a zero gradient.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamHyper hyper);

  void Step(double lr);
  void ZeroGrad();
  // Global L2 norm of all gradients, then rescales them to at most max_norm.
  double ClipGradNorm(double max_norm);
  long steps_taken() const { return steps_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<AdamMoments> moments_;
  AdamHyper hyper_;
  long steps_ = 0;
};

}  // namespace t2r
