#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "orthoplane/tensor.hpp"

namespace orthoplane {

inline constexpr Real kPrimitiveTolerance = 1e-6;
inline constexpr Real kComposedTolerance = 1e-4;

struct GradCheckEntry {
  std::string scope;
  std::string name;
  Real error = 0.0;
  Real tolerance = 0.0;

  bool passed() const { return error < tolerance; }
};

// Scopes: numerics, attention, renderer, diffusion, or all. Primitives are
// held to kPrimitiveTolerance, composed paths to kComposedTolerance.
// Throws std::invalid_argument for an unknown scope.
std::vector<GradCheckEntry> run_grad_suite(const std::string& scope, std::uint64_t seed);

// Fixed-width table, one line per entry, then a summary line.
std::string format_grad_report(const std::vector<GradCheckEntry>& entries);

}  // namespace orthoplane
