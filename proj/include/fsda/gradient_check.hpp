#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "fsda/losses.hpp"

namespace fsda {

struct GradientCheckConfig {
  int instances = 100;
  double step = 1e-5;       // central-difference step on W entries
  double tolerance = 1e-4;  // relative Frobenius error bound
  std::uint64_t seed = 7;
  int descriptor_dim = 6;
  int pre_dim = 8;
  // Added to one analytic gradient entry before comparison; lets the check
  // subcommand demonstrate that a wrong gradient is caught.
  double perturb = 0.0;
};

struct GradientCheckResult {
  std::string term;
  double max_relative_error = 0.0;
  int instances = 0;
  bool passed = false;
};

// For each loss term, compares the analytic dL/dW from evaluate_total_loss
// against central differences over every weight entry on randomly generated
// two-view batches. Instances landing within finite-difference reach of a
// relu or hinge kink (or a vanishing pairwise distance) are resampled.
std::vector<GradientCheckResult> check_loss_gradients(
    const GradientCheckConfig& cfg);

struct SelfCheckReport {
  std::vector<std::string> lines;  // "pass <name>" / "fail <name>: <detail>"
  std::vector<GradientCheckResult> gradients;
  bool passed = true;
};

// Closed-form and invariance spot checks plus the gradient sweep above;
// backs the `check` subcommand.
SelfCheckReport run_self_checks(const GradientCheckConfig& cfg);

}  // namespace fsda
