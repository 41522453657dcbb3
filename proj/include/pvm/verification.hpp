#pragma once

#include <string>
#include <vector>

namespace pvm {

struct SuiteResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

/// Invariant suites shared by the verify CLI and the acceptance harness.
/// Defaults match the binding counts; smaller counts are for quick runs.
SuiteResult suite_mask_oracle(int cases = 1000);
SuiteResult suite_agnosticism(int iters = 100);
SuiteResult suite_all_valid(int cases = 50);
SuiteResult suite_grad_checks(int instantiations = 20);
SuiteResult suite_fill(int cases = 200);

std::vector<std::string> suite_names();
SuiteResult run_suite(const std::string& name);
std::vector<SuiteResult> run_all_suites();

}  // namespace pvm
