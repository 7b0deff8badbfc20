#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cln/graph.hpp"
#include "cln/tensor.hpp"

namespace cln {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step_count = 0;
  Tensor m;
  Tensor v;
};

// One bias-corrected Adam update of `param` in place. A fresh state (empty
// moments) is sized on first use.
void adam_step(Tensor& param, std::span<const double> grad, AdamState& state,
               const AdamConfig& config);

// Adam over a fixed set of tensors. Only the tensors handed in here are ever
// updated; callers control isolation by choosing that set.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig config);

  void zero_grad();
  void step();
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
  AdamConfig config_;
};

// Builds the scalar loss of `params` on a fresh graph.
using ScalarFunction = std::function<Var(Graph&)>;

// Max over all components of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6),
// numeric being the central difference with step h. Every tensor in `params`
// must have requires_grad set. Throws std::runtime_error("non-finite gradient").
double grad_check(const ScalarFunction& fn, std::span<Tensor* const> params, double h = 1e-5);

}  // namespace cln
