// Finite-difference oracle for reverse-mode gradients.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wavediff/tape.hpp"

namespace wavediff::ad {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  bool within(double tolerance) const { return worst <= tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Entries sampled per parameter tensor; larger tensors are spot-checked
  // deterministically instead of exhaustively.
  int max_entries_per_param = 16;
  uint64_t sample_seed = 1234;
};

// `build` must construct the scalar objective on the given tape from the
// current parameter values, deterministically. Central differences
// (f(θ+h) − f(θ−h)) / 2h are compared against the reverse-mode gradient;
// the relative error denominator is max(1, |analytic|, |numeric|).
GradCheckReport grad_check(const std::function<Var(Tape&)>& build, ParameterSet& params,
                           const GradCheckOptions& opts = {});

}  // namespace wavediff::ad
