#include "sapt/optimizer.hpp"

#include <cmath>

namespace sapt {

void AdamHyper::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("adam_beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam_beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam_eps must be > 0");
}

AdamState AdamState::zeros(Eigen::Index size) { return {Vector::Zero(size), Vector::Zero(size), 0}; }

void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamHyper& hyper) {
  require(grads.size() == params.size() && state.first_moment.size() == params.size() &&
              state.second_moment.size() == params.size(),
          "adam_step: parameter, gradient and state sizes differ");
  if (!grads.allFinite()) throw NumericalFailure("adam_step: non-finite gradient", "");
  state.step += 1;
  state.first_moment = hyper.beta1 * state.first_moment + (1.0 - hyper.beta1) * grads;
  state.second_moment = hyper.beta2 * state.second_moment + (1.0 - hyper.beta2) * grads.cwiseAbs2();
  const double bias1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double m_hat = state.first_moment(i) / bias1;
    const double v_hat = state.second_moment(i) / bias2;
    params(i) -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

}  // namespace sapt
