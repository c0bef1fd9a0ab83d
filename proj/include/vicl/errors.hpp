#pragma once

#include <stdexcept>
#include <string>

namespace vicl {

// Bad shapes, mismatched dimensions between tensors/images.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration (unknown keys, impossible settings). CLI maps this to exit code 2.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an API precondition (non-scalar loss, t outside [0,1], ...).
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

// I/O or data problems at runtime (missing file, bad magic, degenerate input).
struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vicl
