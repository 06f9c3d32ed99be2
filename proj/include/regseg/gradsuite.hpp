#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "regseg/gradcheck.hpp"

namespace regseg::loss {

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t probed = 0;
};

/// Finite-difference check of every training loss, the two weighted totals
/// and the warp field gradient on random size x size instances (64-bit).
/// Field samples keep fractional offsets away from the bilinear kinks.
std::vector<GradSuiteEntry> gradient_suite(int size, double eps, std::uint64_t seed = 0);

}  // namespace regseg::loss
