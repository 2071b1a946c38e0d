// One line per criterion; nonzero exit if anything fails.

#include <iostream>

#include "metalearn/checks.hpp"

int main() {
  const auto results = metalearn::run_acceptance_checks(std::cout);
  int failed = 0;
  for (const auto& r : results) {
    if (!r.passed) ++failed;
  }
  std::cout << (results.size() - failed) << "/" << results.size()
            << " checks passed\n";
  return failed == 0 ? 0 : 1;
}
