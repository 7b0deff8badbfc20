#include "cln/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cln {

void adam_step(Tensor& param, std::span<const double> grad, AdamState& state,
               const AdamConfig& config) {
  if (grad.size() != param.numel()) throw std::invalid_argument("adam_step: shape mismatch");
  if (!(config.lr > 0.0)) throw std::invalid_argument("adam_step: lr must be positive");
  if (state.m.numel() == 0 && state.v.numel() == 0) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
  }
  if (state.m.shape() != param.shape() || state.v.shape() != param.shape())
    throw std::invalid_argument("adam_step: shape mismatch");

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  auto p = param.mutable_values();
  auto m = state.m.mutable_values();
  auto v = state.v.mutable_values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    p[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
  }
}

Adam::Adam(std::vector<Tensor*> params, AdamConfig config)
    : params_(std::move(params)), states_(params_.size()), config_(config) {
  for (Tensor* p : params_)
    if (!p->requires_grad()) throw std::invalid_argument("Adam: parameter without requires_grad");
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    adam_step(*params_[i], params_[i]->grad(), states_[i], config_);
}

double grad_check(const ScalarFunction& fn, std::span<Tensor* const> params, double h) {
  for (Tensor* p : params) {
    if (!p->requires_grad()) throw std::invalid_argument("grad_check: parameter without grad");
    p->zero_grad();
  }
  {
    Graph g;
    Var loss = fn(g);
    g.backward(loss);
  }
  auto evaluate = [&]() {
    Graph g;
    return g.item(fn(g));
  };

  double worst = 0.0;
  for (Tensor* p : params) {
    auto vals = p->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = evaluate();
      vals[i] = orig - h;
      const double down = evaluate();
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad()[i];
      if (!std::isfinite(numeric) || !std::isfinite(analytic))
        throw std::runtime_error("non-finite gradient");
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace cln
