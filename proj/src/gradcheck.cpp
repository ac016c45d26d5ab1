#include "wavediff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace wavediff::ad {

namespace {

double eval_scalar(const std::function<Var(Tape&)>& build) {
  Tape t;
  const Var root = build(t);
  return t.value(root)(0, 0);
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Tape&)>& build, ParameterSet& params,
                           const GradCheckOptions& opts) {
  params.zero_grads();
  {
    Tape t;
    const Var root = build(t);
    t.backward(root);
    t.flush_param_grads();
  }

  GradCheckReport report;
  std::mt19937_64 rng(opts.sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params[pi];
    const Eigen::Index total = p.value.size();

    std::vector<Eigen::Index> picks;
    if (total <= opts.max_entries_per_param) {
      picks.resize(std::size_t(total));
      for (Eigen::Index i = 0; i < total; ++i) picks[std::size_t(i)] = i;
    } else {
      std::uniform_int_distribution<Eigen::Index> dist(0, total - 1);
      for (int i = 0; i < opts.max_entries_per_param; ++i) picks.push_back(dist(rng));
    }

    GradCheckEntry entry;
    entry.name = p.name;
    for (const Eigen::Index flat : picks) {
      const Eigen::Index r = flat / p.value.cols();
      const Eigen::Index c = flat % p.value.cols();
      const double saved = p.value(r, c);

      p.value(r, c) = saved + opts.step;
      const double f_plus = eval_scalar(build);
      p.value(r, c) = saved - opts.step;
      const double f_minus = eval_scalar(build);
      p.value(r, c) = saved;

      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double analytic = p.grad(r, c);
      const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic)});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(numeric - analytic) / denom);
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  params.zero_grads();
  return report;
}

}  // namespace wavediff::ad
