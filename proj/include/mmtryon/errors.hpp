#pragma once

#include <stdexcept>
#include <string>

namespace mmtryon {

// Numerical breakdown at runtime (NaN/Inf in a sampler step, diverged loss).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg)
        : std::runtime_error(msg) {}
};

// Malformed on-disk artifact (checkpoint, manifest, vocabulary file).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg)
        : std::runtime_error(msg) {}
};

// A caller broke an API contract that cannot be expressed in types
// (e.g. running encoder pretraining against an unfrozen denoiser).
struct ContractViolation : std::logic_error {
    explicit ContractViolation(const std::string& msg)
        : std::logic_error(msg) {}
};

// Missing prerequisite (checkpoint, dataset) for a requested run.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg)
        : std::runtime_error(msg) {}
};

// Failure reported by a data-pipeline backend, tagged with the sample id.
struct BackendError : std::runtime_error {
    BackendError(const std::string& sample_id, const std::string& msg)
        : std::runtime_error("sample " + sample_id + ": " + msg), sample_id(sample_id) {}
    std::string sample_id;
};

}  // namespace mmtryon
