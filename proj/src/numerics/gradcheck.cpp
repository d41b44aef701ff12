#include "mmk/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mmk/errors.hpp"
#include "mmk/rng.hpp"

namespace mmk {

namespace {

double evaluate(const LossBuilder& build, const ParamMap& params) {
  Graph g;
  Var loss = build(g, params);
  if (loss.value().numel() != 1) throw ContractError("gradient check loss must be scalar");
  return loss.value().item();
}

std::vector<std::size_t> pick_coords(std::size_t total, const FiniteDiffOptions& opts, std::uint64_t block_index) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  if (opts.max_coords_per_block == 0 || total <= opts.max_coords_per_block) return idx;
  Rng rng(derive_seed(opts.sample_seed, block_index));
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(opts.max_coords_per_block);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

CheckReport finite_diff_check(const LossBuilder& build, ParamMap params, const FiniteDiffOptions& opts) {
  if (!(opts.eps >= 1e-7 && opts.eps <= 1e-3)) {
    throw NumericError("finite difference step " + std::to_string(opts.eps) +
                       " outside [1e-7, 1e-3] (step underflow or truncation dominated)");
  }
  const double f0 = evaluate(build, params);
  const double f0_again = evaluate(build, params);
  if (f0 != f0_again) throw ReproducibilityError("loss function is not deterministic: two evaluations differ");

  Gradients grads = [&] {
    Graph g;
    Var loss = build(g, params);
    return g.backward(loss);
  }();

  CheckReport report;
  report.eps = opts.eps;
  report.tol = opts.tol;
  report.abs_floor = opts.abs_floor;
  report.sampling = opts.max_coords_per_block == 0
                        ? "all coordinates"
                        : "up to " + std::to_string(opts.max_coords_per_block) +
                              " coordinates per block, uniform sample seeded by " + std::to_string(opts.sample_seed);

  std::uint64_t block_index = 0;
  for (auto& [name, tensor] : params) {
    auto git = grads.named().find(name);
    if (git == grads.named().end()) {
      ++block_index;
      continue;  // parameter not bound by the loss
    }
    const Tensor& analytic = git->second;
    BlockCheck block;
    block.name = name;
    block.coords_total = tensor.numel();
    for (std::size_t i : pick_coords(tensor.numel(), opts, block_index++)) {
      const double orig = tensor[i];
      tensor[i] = orig + opts.eps;
      const double fp = evaluate(build, params);
      tensor[i] = orig - opts.eps;
      const double fm = evaluate(build, params);
      tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      ++block.coords_checked;
      block.max_abs_err = std::max(block.max_abs_err, abs_err);
      if (block.coords_checked == 1 || rel_err > block.max_rel_err) {
        block.max_rel_err = rel_err;
        block.worst_index = i;
        block.analytic_at_worst = a;
        block.numeric_at_worst = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }
  report.passed = report.max_rel_err < opts.tol;
  return report;
}

std::string format_report(const CheckReport& r) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  for (const auto& b : r.blocks) {
    os << "  " << b.name << "  checked " << b.coords_checked << "/" << b.coords_total << "  max_rel " << b.max_rel_err
       << "  max_abs " << b.max_abs_err << "\n";
  }
  os << "eps " << r.eps << "  tol " << r.tol << "  floor " << r.abs_floor << "  (" << r.sampling << ")\n";
  os << "max relative error " << r.max_rel_err << "  -> " << (r.passed ? "PASS" : "FAIL") << "\n";
  return os.str();
}

}  // namespace mmk
