#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tallpack {

enum class errc {
    io_error,
    malformed_header,
    unsupported_dtype,
    non_finite_value,
    truncated_file,
    incompatible_shapes,
    frozen_key_modified,
    invalid_key_spec,
    empty_input,
    non_positive_lambda,
    out_of_range_n,
    empty_grid,
    bad_trim_fraction,
    bad_consensus_k,
    key_order_mismatch,
    bit_count_mismatch,
    non_zero_padding,
    manifest_mismatch,
    unsupported_version,
    bad_fraction,
    indivisible_p,
    length_mismatch,
    zero_denominator,
    unknown_task,
};

constexpr std::string_view errc_name(errc code) noexcept {
    switch (code) {
    case errc::io_error: return "IoError";
    case errc::malformed_header: return "MalformedHeader";
    case errc::unsupported_dtype: return "UnsupportedDtype";
    case errc::non_finite_value: return "NonFiniteValue";
    case errc::truncated_file: return "TruncatedFile";
    case errc::incompatible_shapes: return "IncompatibleShapes";
    case errc::frozen_key_modified: return "FrozenKeyModified";
    case errc::invalid_key_spec: return "InvalidKeySpec";
    case errc::empty_input: return "EmptyInput";
    case errc::non_positive_lambda: return "NonPositiveLambda";
    case errc::out_of_range_n: return "OutOfRangeN";
    case errc::empty_grid: return "EmptyGrid";
    case errc::bad_trim_fraction: return "BadTrimFraction";
    case errc::bad_consensus_k: return "BadConsensusK";
    case errc::key_order_mismatch: return "KeyOrderMismatch";
    case errc::bit_count_mismatch: return "BitCountMismatch";
    case errc::non_zero_padding: return "NonZeroPadding";
    case errc::manifest_mismatch: return "ManifestMismatch";
    case errc::unsupported_version: return "UnsupportedVersion";
    case errc::bad_fraction: return "BadFraction";
    case errc::indivisible_p: return "IndivisibleP";
    case errc::length_mismatch: return "LengthMismatch";
    case errc::zero_denominator: return "ZeroDenominator";
    case errc::unknown_task: return "UnknownTask";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the `errc` codes; the
/// code's name is what the CLI prints.
class error : public std::runtime_error {
public:
    error(errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    errc code() const noexcept { return code_; }
    std::string_view name() const noexcept { return errc_name(code_); }

private:
    errc code_;
};

} // namespace tallpack
