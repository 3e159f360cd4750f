// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mrag {

// Base of every error thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration or usage (CLI exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

// Problems with input data or numerical preconditions (CLI exit code 3).
struct DataError : Error {
    using Error::Error;
};

struct FormatError : DataError {
    using DataError::DataError;
};
struct DimensionError : DataError {
    using DataError::DataError;
};
struct ValueError : DataError {
    using DataError::DataError;
};
struct EmptyDatasetError : DataError {
    using DataError::DataError;
};
struct DegenerateVectorError : DataError {
    using DataError::DataError;
};
struct SingularSystemError : DataError {
    using DataError::DataError;
};
struct DegenerateInputError : DataError {
    using DataError::DataError;
};
struct CorpusStatsError : DataError {
    using DataError::DataError;
};
struct ReferenceError : DataError {
    using DataError::DataError;
};
struct EmptyVocabularyError : DataError {
    using DataError::DataError;
};

// Failures talking to a generation/embedding provider (CLI exit code 4).
struct ProviderError : Error {
    using Error::Error;
};

struct TimeoutError : ProviderError {
    using ProviderError::ProviderError;
};
struct EmptyGenerationError : ProviderError {
    using ProviderError::ProviderError;
};

} // namespace mrag
