#pragma once

#include <stdexcept>
#include <string>

namespace fusediff {

// Stable error categories; the CLI maps these onto exit codes.
enum class errc {
    invalid_layout,
    out_of_range,
    schedule_construction,
    zero_probability_evidence,
    invalid_prediction,
    oracle_budget,
    render,
    dataset_format,
    checkpoint_version,
    checkpoint_hash,
    checkpoint_truncated,
    sampler_incomplete,
    numeric,
    config,
    io,
};

const char* errc_name(errc c);

class error : public std::runtime_error {
  public:
    error(errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
    errc code() const { return code_; }

  private:
    errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

} // namespace fusediff
