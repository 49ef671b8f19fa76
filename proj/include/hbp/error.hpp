// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hbp {

// Root of all harness errors. Every error carries a short machine-readable
// kind so the runner can record it in a RunRecord without RTTI games.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define HBP_DEFINE_ERROR(Name, Kind)                                              \
    class Name : public Error {                                                  \
    public:                                                                      \
        explicit Name(const std::string& what) : Error(Kind, what) {}            \
    }

HBP_DEFINE_ERROR(ParseError, "parse");
HBP_DEFINE_ERROR(MonotonicityError, "monotonicity");
HBP_DEFINE_ERROR(ReferenceError, "reference");
HBP_DEFINE_ERROR(MalformedLabelError, "malformed_label");
HBP_DEFINE_ERROR(InsufficientPoolError, "insufficient_pool");
HBP_DEFINE_ERROR(MissingImageError, "missing_image");
HBP_DEFINE_ERROR(BudgetExceededError, "budget_exceeded");
HBP_DEFINE_ERROR(RepresentationMismatchError, "representation_mismatch");
HBP_DEFINE_ERROR(AuthError, "auth");
HBP_DEFINE_ERROR(RequestError, "request");
HBP_DEFINE_ERROR(OracleUnavailableError, "oracle_unavailable");
HBP_DEFINE_ERROR(ConfigError, "config");
HBP_DEFINE_ERROR(EmptyResultsError, "empty_results");
HBP_DEFINE_ERROR(IoError, "io");

#undef HBP_DEFINE_ERROR

// Raised when every retry of a transient failure has been consumed.
class RetriesExhaustedError : public Error {
public:
    RetriesExhaustedError(const std::string& what, std::string last_cause)
        : Error("retries_exhausted", what), last_cause_(std::move(last_cause)) {}

    const std::string& last_cause() const noexcept { return last_cause_; }

private:
    std::string last_cause_;
};

}  // namespace hbp
