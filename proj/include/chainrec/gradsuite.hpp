#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace chainrec {

// Finite-difference check results for one differentiable unit.
struct GradSuiteEntry {
  std::string name;
  std::size_t configs = 0;
  std::size_t passed = 0;
  double max_error = 0.0;

  bool pass() const { return configs > 0 && passed == configs; }
};

// Checks every tensor op, every nn layer, match_score, reader_encode and the
// frozen-trace policy surrogate over `configs` random configurations each
// (shapes, sizes and values drawn from seed).
std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed, std::size_t configs = 10,
                                           double eps = 1e-6, double tol = 1e-5);

}  // namespace chainrec
