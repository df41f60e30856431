#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"
#include "dirgap/nn/tape.hpp"
#include "dirgap/rng.hpp"

namespace dirgap::nn {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t coords_per_group = 32;  // groups smaller than this are checked fully
  std::uint64_t seed = 0;
  // Denominator floor for the relative error, so that exact-zero and
  // roundoff-sized gradients are compared on an absolute scale.
  double abs_floor = 1e-6;
  // Runs after the analytic backward pass; tests use it to corrupt gradients.
  std::function<void(ParameterStore<double>&)> after_backward;
};

struct GroupResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GroupResult> groups;
  double max_rel_error = 0.0;
  std::string worst_group;
  bool pass = true;
};

// Builds the scalar loss on the given tape from the given parameters.
using LossFn = std::function<Var(Tape<double>&, ParameterStore<double>&)>;

inline GradCheckReport grad_check(const LossFn& loss_fn, ParameterStore<double>& params,
                                  const GradCheckOptions& opt = {}) {
  params.zero_grad();
  {
    Tape<double> tape;
    Var loss = loss_fn(tape, params);
    if (!std::isfinite(tape.scalar(loss))) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
  }
  if (opt.after_backward) opt.after_backward(params);

  auto evaluate = [&] {
    Tape<double> tape(false);
    const double v = tape.scalar(loss_fn(tape, params));
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  Rng rng(opt.seed);
  GradCheckReport report;
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    GroupResult g;
    g.name = name;
    std::vector<std::size_t> idx(e.value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.coords_per_group) {
      // Partial Fisher-Yates: the first coords_per_group slots are a sample.
      for (std::size_t i = 0; i < opt.coords_per_group; ++i)
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(opt.coords_per_group);
    }
    for (std::size_t i : idx) {
      const double saved = e.value[i];
      e.value[i] = saved + opt.eps;
      const double up = evaluate();
      e.value[i] = saved - opt.eps;
      const double down = evaluate();
      e.value[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double analytic = e.grad[i];
      if (!std::isfinite(analytic)) throw NumericError("grad_check: non-finite gradient in " + name);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++g.checked;
      if (rel >= g.max_rel_error) {
        g.max_rel_error = rel;
        g.worst_index = i;
        g.analytic = analytic;
        g.numeric = numeric;
      }
    }
    if (report.worst_group.empty() || g.max_rel_error > report.max_rel_error) {
      report.max_rel_error = g.max_rel_error;
      report.worst_group = name;
    }
    report.groups.push_back(std::move(g));
  }
  report.pass = report.max_rel_error <= opt.tol;
  return report;
}

}  // namespace dirgap::nn
