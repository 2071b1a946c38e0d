#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace metalearn {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// The full verification battery, in a fixed order, one line streamed to `os`
// per check as it finishes. A check that throws is reported as failed with
// the exception text; the battery always runs to the end.
std::vector<CheckResult> run_acceptance_checks(std::ostream& os);

}  // namespace metalearn
