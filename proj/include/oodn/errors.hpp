#pragma once

#include <stdexcept>
#include <string>

namespace oodn {

/// Base of every error raised by the toolkit. `kind()` is a stable tag used in
/// diagnostics and tests; `what()` carries the human-readable detail.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& detail)
        : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define OODN_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                              \
    public:                                                                  \
        explicit Name(const std::string& detail) : Error(#Name, detail) {}   \
    }

// data
OODN_DEFINE_ERROR(UnsupportedMagic);
OODN_DEFINE_ERROR(TruncatedPayload);
OODN_DEFINE_ERROR(EmptySplit);

// nn / centerloss
OODN_DEFINE_ERROR(ShapeMismatch);
OODN_DEFINE_ERROR(LabelOutOfRange);
OODN_DEFINE_ERROR(NonFiniteLoss);
OODN_DEFINE_ERROR(DimMismatch);

// detector
OODN_DEFINE_ERROR(DegenerateClass);
OODN_DEFINE_ERROR(FactorizationFailure);
OODN_DEFINE_ERROR(NotCalibrated);

// head
OODN_DEFINE_ERROR(EmptyDataset);

// evalkit
OODN_DEFINE_ERROR(SingleClass);
OODN_DEFINE_ERROR(DegenerateInput);

// archive / orchestration
OODN_DEFINE_ERROR(BadMagic);
OODN_DEFINE_ERROR(VersionMismatch);
OODN_DEFINE_ERROR(CorruptLength);
OODN_DEFINE_ERROR(ConfigError);

#undef OODN_DEFINE_ERROR

/// Wraps a module error with the pipeline stage it escaped from.
class StageError : public Error {
public:
    StageError(const std::string& stage, const Error& inner)
        : Error(inner.kind(), "[" + stage + "] " + inner.what()), stage_(stage) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

} // namespace oodn
