#pragma once

#include <stdexcept>
#include <string>

namespace flowopd {

/// Training produced a non-finite loss, gradient, or state.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A condition whose task has no expert in the routing table.
class RoutingError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Groups passed to an on-policy objective were sampled by other parameters.
class OffPolicyError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace flowopd
