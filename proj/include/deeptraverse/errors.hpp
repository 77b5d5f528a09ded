#pragma once

#include <stdexcept>
#include <string>

namespace dt {

// Invalid model/layer configuration or mismatched shapes between parameters
// and activations. The message names the offending field or dimension.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller supplied a value outside an operation's domain (labels out of
// range, non-scalar loss, ...).
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed file contents: dataset files, checkpoints, config files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (gradients, loss).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Broken internal invariant, e.g. a node that does not belong to a tape.
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace dt
