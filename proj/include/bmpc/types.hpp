#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace bmpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

enum class ErrorCode {
    dimension_mismatch,
    rank_deficient,
    not_positive_definite,
    singular_gamma,
    infeasible,
    unbounded,
    max_iterations,
    numerical,
    cap_exceeded,
    inclusion_violated,
    config,
};

const char* to_string(ErrorCode code);

/// Exception carrying a machine-readable category alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace bmpc
