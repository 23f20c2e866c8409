#pragma once

#include <stdexcept>
#include <string>

namespace pivotnmt {

// Shape contract violated by an op; the message names the op and both shapes.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf where a finite value is required.
class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Misuse of an API contract, e.g. backward() on a non-scalar.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Inconsistent configuration: vocabulary mismatch, beam size 0, missing checkpoint.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Bad user data: empty corpus, empty reference, line-count mismatch.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace pivotnmt
