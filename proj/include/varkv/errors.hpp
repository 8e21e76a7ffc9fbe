#pragma once

#include <stdexcept>
#include <string>

namespace varkv {

// Invalid configuration (bad dimensions, budgets, schedules). CLI exit code 2.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent runtime state (cache/step mismatch, double append). CLI exit code 3.
struct state_error : std::runtime_error {
    explicit state_error(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem failures while writing traces/metrics. CLI exit code 3.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace varkv
