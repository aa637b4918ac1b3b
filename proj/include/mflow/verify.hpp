#pragma once

// Invariant suites behind `mflow verify`: each check reports the measured
// error next to its tolerance.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mflow {

struct CheckResult {
  std::string suite;
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  /// Mutation rehearsal: use -c_k in the structuring tables of the
  /// morphology suite. Duality survives this bug; the PDE oracles do not.
  bool flip_structuring_sign = false;
};

const std::vector<std::string>& verify_suites();  // geometry, morphology, equivariance, gradients, diffusion

/// Runs one suite or "all"; throws std::invalid_argument for unknown names.
std::vector<CheckResult> run_verification(const std::string& suite, const VerifyOptions& options = {});

std::vector<CheckResult> verify_geometry(const VerifyOptions& options);
std::vector<CheckResult> verify_morphology(const VerifyOptions& options);
std::vector<CheckResult> verify_equivariance(const VerifyOptions& options);
std::vector<CheckResult> verify_gradients(const VerifyOptions& options);
std::vector<CheckResult> verify_diffusion(const VerifyOptions& options);

/// suite,check,error,tolerance,passed,detail
void write_verification_csv(const std::vector<CheckResult>& results, const std::string& path);
void print_verification(const std::vector<CheckResult>& results, std::ostream& out);

}  // namespace mflow
