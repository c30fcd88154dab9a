// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fersnet/autodiff.hpp"
#include "fersnet/rng.hpp"

namespace fersnet {

struct GradCheckOptions {
  double eps = 1e-5;               // central-difference step, must lie in [1e-6, 1e-3]
  long long max_elements_per_param = 0;  // 0 = exhaustive
  std::uint64_t seed = 0;          // element subsampling stream
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_param = -1;
  long long worst_element = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central finite-difference check of reverse-mode gradients, in double
/// precision. `f` rebuilds and returns the scalar loss from the current
/// parameter values; it must be deterministic (batch norm in eval mode or
/// with frozen running stats).
inline GradCheckResult grad_check(const std::function<Var<double>()>& f,
                                  const std::vector<Var<double>>& params,
                                  GradCheckOptions opt = {}) {
  if (opt.eps < 1e-6 || opt.eps > 1e-3)
    throw InputError("grad_check: eps must lie in [1e-6, 1e-3]");

  Var<double> loss = f();
  if (!std::isfinite(loss.item()))
    throw NumericError("grad_check: non-finite loss at the unperturbed point (param -1)");
  for (const auto& p : params) const_cast<Var<double>&>(p).zero_grad();
  loss.backward();

  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params)
    analytic.push_back(p.grad().defined() ? p.grad() : Tensor<double>(p.shape()));

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& vals = const_cast<Var<double>&>(params[pi]).value();
    long long n = vals.numel();
    std::vector<long long> idx;
    if (opt.max_elements_per_param > 0 && n > opt.max_elements_per_param) {
      RngStream rs = RngStream::derive(opt.seed, "gradcheck", pi);
      std::vector<long long> all(static_cast<size_t>(n));
      for (long long i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      for (long long i = 0; i < opt.max_elements_per_param; ++i) {
        long long j = i + rs.uniform_int(static_cast<int>(n - i));
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
        idx.push_back(all[static_cast<size_t>(i)]);
      }
    } else {
      for (long long i = 0; i < n; ++i) idx.push_back(i);
    }
    for (long long i : idx) {
      double saved = vals[i];
      vals[i] = saved + opt.eps;
      double f1 = f().item();
      vals[i] = saved - opt.eps;
      double f2 = f().item();
      vals[i] = saved;
      if (!std::isfinite(f1) || !std::isfinite(f2))
        throw NumericError("grad_check: non-finite loss while perturbing param " +
                           std::to_string(pi) + " element " + std::to_string(i));
      double num = (f1 - f2) / (2.0 * opt.eps);
      double ana = analytic[pi][i];
      double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = static_cast<int>(pi);
        res.worst_element = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace fersnet
