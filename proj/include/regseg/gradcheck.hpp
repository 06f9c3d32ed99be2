#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "regseg/tape.hpp"

namespace regseg::diff {

/// Builds a scalar loss from named leaves. Must be deterministic.
using LossBuilder = std::function<Var<double>(const std::map<std::string, Var<double>>&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Entries probed per parameter; 0 probes every entry. Larger tensors are
  /// sampled with a seeded stride so the probe set is reproducible.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t probed = 0;
};

struct GradCheckReport {
  std::map<std::string, GradCheckEntry> per_param;
  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

/// Thrown when two forward evaluations at the same point differ.
class NonDeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Central finite differences against the reverse sweep, per named parameter.
GradCheckReport grad_check(const LossBuilder& build, const ParamSet<double>& params,
                           const GradCheckOptions& opts = {});

}  // namespace regseg::diff
