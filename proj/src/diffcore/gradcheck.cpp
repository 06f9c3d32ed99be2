#include "regseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace regseg::diff {

double GradCheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& [_, e] : per_param) m = std::max(m, e.max_rel_error);
  return m;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

namespace {

double evaluate(const LossBuilder& build, const ParamSet<double>& params) {
  return build(bind_params(params, false)).item();
}

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, const ParamSet<double>& params,
                           const GradCheckOptions& opts) {
  const double base = evaluate(build, params);
  if (!bit_equal(base, evaluate(build, params)))
    throw NonDeterministicLoss("grad_check: two forward passes at the same point disagree");

  const Var<double> loss = build(bind_params(params, true));
  const Gradients<double> analytic = backward(loss, params);

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  ParamSet<double> probe = params;
  for (const auto& [name, p] : params) {
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries_per_param && idx.size() > opts.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_entries_per_param);
      std::sort(idx.begin(), idx.end());
    }
    GradCheckEntry entry;
    auto& target = probe.at(name);
    for (std::size_t i : idx) {
      const double orig = target[i];
      target[i] = orig + opts.eps;
      const double fp = evaluate(build, probe);
      target[i] = orig - opts.eps;
      const double fm = evaluate(build, probe);
      target[i] = orig;
      const double numeric = (fp - fm) / (2 * opts.eps);
      const double a = analytic.at(name)[i];
      const double err = relative_error(a, numeric);
      if (err >= entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
      ++entry.probed;
    }
    report.per_param.emplace(name, entry);
  }
  return report;
}

}  // namespace regseg::diff
