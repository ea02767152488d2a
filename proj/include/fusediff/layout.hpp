#pragma once

#include <vector>

#include "fusediff/errors.hpp"

namespace fusediff {

// Modality id returned for the mask token, which belongs to no modality.
inline constexpr int kMaskModality = -1;

// Fused token index space: one contiguous segment per modality followed by a
// single absorbing mask index. Immutable after construction.
struct ModalityLayout {
    std::vector<int> sizes;   // K per modality, each >= 2
    std::vector<int> offsets; // segment start indices; offsets[0] == 0
    int total = 0;            // sum(sizes) + 1
    int mask_index = 0;       // == total - 1

    static ModalityLayout create(const std::vector<int>& sizes);

    int num_modalities() const { return int(sizes.size()); }
    int segment_begin(int m) const { return offsets[size_t(m)]; }
    int segment_end(int m) const { return offsets[size_t(m)] + sizes[size_t(m)]; }

    // Modality owning `index`, or kMaskModality for the mask index.
    int modality_of(int index) const;

    // 1 iff modality_of(index) == modality. The mask index indicates 0 for
    // every modality; indicators of distinct modalities are mutually exclusive.
    int indicator(int index, int modality) const;

    bool operator==(const ModalityLayout& o) const { return sizes == o.sizes; }
};

// Fixed-layout token sequence spanning all modality segments. Position p holds
// an index in [0, total); non-mask indices must lie in the segment of the
// position's modality.
struct TokenSequence {
    std::vector<int> indices;
    std::vector<int> position_modality;
    std::vector<int> lengths; // positions per modality, in fused order

    // Positions ordered modality 0,1,...,M-1 (the default fused ordering),
    // initialized to all-mask.
    static TokenSequence all_mask(const ModalityLayout& layout, const std::vector<int>& lengths);

    // Custom position ordering: a list of (modality, length) spans.
    static TokenSequence with_order(const ModalityLayout& layout,
                                    const std::vector<std::pair<int, int>>& spans);

    int size() const { return int(indices.size()); }

    // Throws on cross-modal token placement or out-of-range indices.
    void validate(const ModalityLayout& layout) const;
};

} // namespace fusediff
