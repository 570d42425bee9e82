#ifndef MCMIL_ERROR_HPP
#define MCMIL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace mcmil {

enum class ErrorCode {
    dimension,
    not_psd,
    evaluation,
    spec,
    empty_bag,
    degenerate_head,
    parameter,
    undefined,
    label,
    no_discordance,
    degenerate_table,
    degenerate_scatter,
    zero_variance,
    empty_input,
    diverged,
    io,
    config,
};

const char* to_string(ErrorCode code) noexcept;

// Single exception type for the library; the code distinguishes failure kinds.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) {
        throw Error(code, what);
    }
}

}  // namespace mcmil

#endif
