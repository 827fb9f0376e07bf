#pragma once

#include <stdexcept>
#include <string>

namespace pmuwavc {

enum class ErrorCode {
    invalid_argument,
    invalid_case,
    zero_impedance,
    power_flow_diverged,
    singular_jacobian,
    integration_diverged,
    insufficient_data,
    singular_matrix,
    ill_conditioned,
    unidentifiable,
    rank_deficient,
    unknown_bus,
    io,
};

inline const char *to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::invalid_case: return "invalid_case";
    case ErrorCode::zero_impedance: return "zero_impedance";
    case ErrorCode::power_flow_diverged: return "power_flow_diverged";
    case ErrorCode::singular_jacobian: return "singular_jacobian";
    case ErrorCode::integration_diverged: return "integration_diverged";
    case ErrorCode::insufficient_data: return "insufficient_data";
    case ErrorCode::singular_matrix: return "singular_matrix";
    case ErrorCode::ill_conditioned: return "ill_conditioned";
    case ErrorCode::unidentifiable: return "unidentifiable";
    case ErrorCode::rank_deficient: return "rank_deficient";
    case ErrorCode::unknown_bus: return "unknown_bus";
    case ErrorCode::io: return "io";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// callers (the experiment harness in particular) can record it per cell
/// without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

    ErrorCode code() const noexcept { return code_; }
    /// Message without the code prefix.
    const std::string &detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

} // namespace pmuwavc
