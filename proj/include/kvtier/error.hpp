// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace kvtier {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed file: wrong magic, unsupported version.
class FormatError : public Error {
public:
    using Error::Error;
};

// File contents disagree with their own header (truncation, size mismatch, bad checksum).
class CorruptionError : public Error {
public:
    using Error::Error;
};

// Data violates a type invariant (non-finite floats, out-of-range counts).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or argument; the message names the offending field.
class ConfigError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace kvtier
