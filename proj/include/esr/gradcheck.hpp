#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "esr/head.hpp"

namespace esr {

// Central finite differences of total_loss over every head parameter.
// Independent of the analytic path: it only calls total_loss.
HeadParams finite_difference_gradients(const StageHead& head, std::span<const LabeledExample> batch,
                                       const EnergyConfig& cfg, double epsilon = 1e-6);

struct GradCheckCase {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checks = 0;
};

// Compares analytic and finite-difference gradients across head variants,
// temperatures and anchor weights.
std::vector<GradCheckCase> run_gradcheck(std::uint64_t seed, double epsilon = 1e-6);

}  // namespace esr
