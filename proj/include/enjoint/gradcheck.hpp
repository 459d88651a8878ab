#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "enjoint/autograd.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

struct GradReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t checked_params = 0;
  bool finite = true;
  std::string message;

  bool passed(double rel_tol) const { return finite && max_rel_err < rel_tol; }
};

struct GradCheckOptions {
  double eps = 1e-6;
  // Entries sampled per tensor; 0 checks every entry.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 0;
  // Relative error is |a-n| / max(|a|, |n|, rel_floor); below the floor the
  // comparison degrades to absolute error scaled by the floor.
  double rel_floor = 1e-6;
};

/// Compares reverse-mode gradients of `loss_fn` with respect to `params`
/// against central differences. `loss_fn` must rebuild its graph from the
/// current parameter values on every call.
inline GradReport grad_check(const std::function<Var<double>()>& loss_fn, std::vector<Var<double>>& params,
                             const GradCheckOptions& opt = {}) {
  GradReport report;
  for (auto& p : params) p.zero_grad();
  Var<double> loss = loss_fn();
  if (!std::isfinite(loss.value().item())) {
    report.finite = false;
    report.message = "non-finite loss";
    return report;
  }
  backward(loss);

  Rng rng(opt.seed);
  for (auto& p : params) {
    const Tensor<double> analytic = p.grad();
    Tensor<double>& value = p.mutable_value();
    std::vector<std::size_t> idx(value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_per_tensor > 0 && idx.size() > opt.max_per_tensor) {
      for (std::size_t i = 0; i < opt.max_per_tensor; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.next() % (idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(opt.max_per_tensor);
    }
    for (std::size_t i : idx) {
      const double saved = value[i];
      value[i] = saved + opt.eps;
      const double fp = loss_fn().value().item();
      value[i] = saved - opt.eps;
      const double fm = loss_fn().value().item();
      value[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.finite = false;
        report.message = "non-finite loss under perturbation";
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.rel_floor});
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
      ++report.checked_params;
    }
  }
  return report;
}

}  // namespace enjoint
