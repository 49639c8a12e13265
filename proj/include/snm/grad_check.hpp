#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "snm/autograd.hpp"

namespace snm {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  // Denominator floor for the relative error. Small gradients are compared
  // on an absolute scale, since central differences carry O(step^2) error.
  double magnitude_floor = 1e-2;
  // Tensors with more entries than this are checked on every entry with a
  // nonzero analytic gradient plus a seeded sample of `sample_size` others.
  std::size_t full_check_limit = 4096;
  std::size_t sample_size = 200;
  std::uint64_t seed = 0;
};

struct GradViolation {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<GradViolation> violations;

  bool passed() const noexcept { return violations.empty(); }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `loss_fn` against central
/// differences. `loss_fn` must build the same scalar loss on the given tape
/// every time it is called with unchanged parameters.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                                  std::span<Parameter* const> params,
                                  const GradCheckOptions& options = {}) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }

  auto evaluate = [&] {
    Tape tape;
    return loss_fn(tape).item();
  };

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (Parameter* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> entries;
    if (n <= options.full_check_limit) {
      entries.resize(n);
      for (std::size_t i = 0; i < n; ++i) entries[i] = i;
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        if (p->grad[i] != 0.0) entries.push_back(i);
      }
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t k = 0; k < options.sample_size; ++k) entries.push_back(pick(rng));
      std::sort(entries.begin(), entries.end());
      entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
    }

    for (std::size_t i : entries) {
      const double original = p->value[i];
      p->value[i] = original + options.step;
      const double up = evaluate();
      p->value[i] = original - options.step;
      const double down = evaluate();
      p->value[i] = original;

      const double numeric = (up - down) / (2.0 * options.step);
      const double analytic = p->grad[i];
      const double err = relative_error(analytic, numeric, options.magnitude_floor);
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
      if (!(err < options.tolerance)) {
        report.violations.push_back({p->name, i, analytic, numeric, err});
      }
    }
  }
  return report;
}

}  // namespace snm
