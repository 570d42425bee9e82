#ifndef MCMIL_SELFTEST_HPP
#define MCMIL_SELFTEST_HPP

#include <functional>
#include <string>
#include <vector>

namespace mcmil {

struct SelfTestCheck {
    std::string name;
    bool passed = false;
    std::string detail;  // failure reason, empty on success
};

using SelfTestReporter = std::function<void(const SelfTestCheck&)>;

/// Runs the built-in worked examples of every module. `reporter` sees each
/// check as it finishes.
std::vector<SelfTestCheck> run_selftest(const SelfTestReporter& reporter = {});

}  // namespace mcmil

#endif
