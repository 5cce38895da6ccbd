#pragma once

#include <stdexcept>
#include <string>

namespace hvp {

// Shape/width mismatches between tensors or network layers.
struct dim_error : std::invalid_argument {
    explicit dim_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid parameter values (ranges, nonpositive stds, bad factors).
struct param_error : std::invalid_argument {
    explicit param_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// NaN/Inf or degenerate covariances at runtime.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violations (non-scalar backward root, missing recorded data).
struct contract_error : std::logic_error {
    explicit contract_error(const std::string& msg) : std::logic_error(msg) {}
};

// Config file problems; maps to CLI exit code 2.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hvp
