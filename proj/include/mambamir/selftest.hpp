#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace mambamir {

struct SelfCheck {
  std::string name;
  std::function<std::string()> run;  // empty string on success, else the failure detail
};

/// Fast invariant suites: transforms, scans, masking statistics, MC moments,
/// gradients, config and container round-trips, dataset determinism.
std::vector<SelfCheck> selftest_suite();

/// Runs every check, printing one PASS/FAIL line each. Returns the number of failures.
int run_selftest(std::ostream& out);

}  // namespace mambamir
