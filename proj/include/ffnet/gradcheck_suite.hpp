#pragma once

// Finite-difference verification of every differentiable op and of one
// small end-to-end model per domain, all in 64-bit.

#include <functional>
#include <string>
#include <vector>

#include "ffnet/autodiff.hpp"

namespace ffnet::gradcheck {

struct CheckResult {
  std::string name;
  std::string kind;  // "op" or "model"
  std::size_t instances = 0;
  std::size_t passed = 0;
  std::size_t coords = 0;
  double max_rel_err = 0;
  double tol = 0;
  bool pass() const { return passed == instances && instances > 0; }
};

struct SuiteOptions {
  std::size_t instances = 20;
  double op_tol = 1e-4;
  double model_tol = 1e-3;
  std::uint64_t seed = 0;
  bool ops = true;
  bool models = true;
  /// Adds a GELU whose backward rule is deliberately wrong.
  bool inject_faulty_op = false;
};

struct SuiteReport {
  std::vector<CheckResult> results;
  std::vector<std::string> uncovered;  // registered ops without a fixture
  bool pass() const;
};

/// One randomized instance; the Rng drives shapes and values.
using Fixture = std::function<ad::GradCheckReport(Rng& rng, double tol)>;

struct NamedFixture {
  std::string name;
  Fixture run;
};

/// One fixture per entry of ad::kDifferentiableOps.
const std::vector<NamedFixture>& op_fixtures();

ad::GradCheckReport check_image_model(Rng& rng, double tol);
ad::GradCheckReport check_forecaster(Rng& rng, double tol);
/// Op named "gelu_faulty" with the derivative of a different function.
ad::GradCheckReport check_faulty_gelu(Rng& rng, double tol);

SuiteReport run_suite(const SuiteOptions& opts, const std::function<void(const CheckResult&)>& on_result = {});

/// name, kind, instances, passed, coords, max_rel_err, tol, status.
void write_report_csv(const std::string& path, const SuiteReport& report);

}  // namespace ffnet::gradcheck
