#pragma once

#include <cstdint>

#include "sapt/common.hpp"

namespace sapt {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct AdamState {
  Vector first_moment;
  Vector second_moment;
  std::int64_t step = 0;

  static AdamState zeros(Eigen::Index size);
};

// Bias-corrected Adam: w -= lr * m_hat / (sqrt(v_hat) + eps).
// Throws NumericalFailure on non-finite gradients without touching its inputs.
void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamHyper& hyper);

}  // namespace sapt
