#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tvlab {

enum class ErrorCode {
    dimension_mismatch,
    decomposition_failure,
    non_positive_lambda,
    support_violation,
    degenerate_input,
    sequence_too_long,
    token_out_of_range,
    injection_dim_mismatch,
    layer_out_of_range,
    empty_batch,
    shape_mismatch,
    vocab_exhausted,
    too_few_shots,
    malformed_number,
    empty_label_set,
    wrong_model,
    empty_queries,
    empty_validation,
    vocab_mismatch,
    unsupported_method,
    length_mismatch,
    invalid_config,
    config_error,
    io_error,
    bad_magic,
    version_mismatch,
    truncated_file,
    digest_mismatch,
    gap_too_small,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries one of the codes above so that
// callers (tests, the CLI exit-code mapping) can branch on the kind.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace tvlab
