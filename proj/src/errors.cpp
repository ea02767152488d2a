#include "fusediff/errors.hpp"

namespace fusediff {

const char* errc_name(errc c) {
    switch (c) {
        case errc::invalid_layout: return "invalid-layout";
        case errc::out_of_range: return "out-of-range";
        case errc::schedule_construction: return "schedule-construction";
        case errc::zero_probability_evidence: return "zero-probability-evidence";
        case errc::invalid_prediction: return "invalid-prediction";
        case errc::oracle_budget: return "oracle-budget";
        case errc::render: return "render";
        case errc::dataset_format: return "dataset-format";
        case errc::checkpoint_version: return "checkpoint-version";
        case errc::checkpoint_hash: return "checkpoint-hash";
        case errc::checkpoint_truncated: return "checkpoint-truncated";
        case errc::sampler_incomplete: return "sampler-incomplete";
        case errc::numeric: return "numeric";
        case errc::config: return "config";
        case errc::io: return "io";
    }
    return "unknown";
}

} // namespace fusediff
