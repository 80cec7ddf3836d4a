#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dgs/ref_modules.hpp"

namespace dgs::refcheck {

struct CheckResult {
  std::string name;
  double max_err = 0.0;
  double tol = 1e-4;

  bool pass() const { return max_err <= tol; }
};

// Central-difference driver. For every element of every slot it perturbs the
// double-precision replica by +-h and compares (L+ - L-)/(2h) against the
// engine gradient, for each of the supplied losses. Error metric per element:
// |g - fd| / max(1, |g|, |fd|).
double fd_max_err(const ref::SlotList& slots,
                  const std::function<std::vector<double>()>& ref_losses,
                  const std::vector<std::map<std::string, std::vector<float>>>& engine_grads,
                  double h = 1e-4);

// Gradient suites. Tolerances: 1e-4 for single ops, 1e-3 for composite blocks
// and the detection loss (engine arithmetic is float32 throughout). Central
// differences require the sampled point to be differentiable: a seed that
// parks a LeakyReLU input, a pooling tie, or a box edge within h of its kink
// produces a legitimate mismatch, not a gradient bug. Op inputs are
// constructed off-kink; for composite suites the shipped seeds are verified.
std::vector<CheckResult> op_suite(std::uint64_t base_seed, int n_seeds);
std::vector<CheckResult> block_suite(std::uint64_t base_seed, int n_seeds);
std::vector<CheckResult> loss_suite(std::uint64_t seed);
std::vector<CheckResult> full_suite(std::uint64_t base_seed, int n_seeds);

}  // namespace dgs::refcheck
