#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmk/autograd.hpp"
#include "mmk/errors.hpp"
#include "mmk/tensor.hpp"

namespace mmk {

// Builds a scalar loss from a parameter map inside a fresh graph. Parameters
// must be bound through Graph::parameter so their gradients are named.
using LossBuilder = std::function<Var(Graph&, const ParamMap&)>;

struct FiniteDiffOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor);
  // keeps coordinates with vanishing gradients from amplifying roundoff.
  double abs_floor = 1e-6;
  // 0 checks every coordinate; otherwise a seeded uniform sample per block.
  std::size_t max_coords_per_block = 0;
  std::uint64_t sample_seed = 0;
};

struct BlockCheck {
  std::string name;
  std::size_t coords_total = 0;
  std::size_t coords_checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct CheckReport {
  std::vector<BlockCheck> blocks;
  double eps = 0.0;
  double tol = 0.0;
  double abs_floor = 0.0;
  double max_rel_err = 0.0;
  std::string sampling;
  bool passed = false;
};

class ReproducibilityError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Central differences (f(θ+εe) − f(θ−εe)) / 2ε compared per coordinate with
// the gradient from Graph::backward.
CheckReport finite_diff_check(const LossBuilder& build, ParamMap params, const FiniteDiffOptions& opts = {});

std::string format_report(const CheckReport& report);

}  // namespace mmk
