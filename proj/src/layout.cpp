#include "fusediff/layout.hpp"

#include <algorithm>

namespace fusediff {

ModalityLayout ModalityLayout::create(const std::vector<int>& sizes) {
    if (sizes.empty()) fail(errc::invalid_layout, "need at least one modality");
    ModalityLayout l;
    l.sizes = sizes;
    l.offsets.reserve(sizes.size());
    int off = 0;
    for (size_t m = 0; m < sizes.size(); ++m) {
        if (sizes[m] < 2)
            fail(errc::invalid_layout,
                 "modality " + std::to_string(m) + " has fewer than 2 states");
        l.offsets.push_back(off);
        off += sizes[m];
    }
    l.total = off + 1;
    l.mask_index = off;
    return l;
}

int ModalityLayout::modality_of(int index) const {
    if (index < 0 || index >= total)
        fail(errc::out_of_range, "token index " + std::to_string(index) + " outside [0," +
                                     std::to_string(total) + ")");
    if (index == mask_index) return kMaskModality;
    // First offset strictly greater than index, minus one.
    auto it = std::upper_bound(offsets.begin(), offsets.end(), index);
    return int(it - offsets.begin()) - 1;
}

int ModalityLayout::indicator(int index, int modality) const {
    if (modality < 0 || modality >= num_modalities())
        fail(errc::out_of_range, "modality id " + std::to_string(modality));
    return modality_of(index) == modality ? 1 : 0;
}

TokenSequence TokenSequence::all_mask(const ModalityLayout& layout,
                                      const std::vector<int>& lengths) {
    if (int(lengths.size()) != layout.num_modalities())
        fail(errc::invalid_layout, "lengths count does not match modality count");
    std::vector<std::pair<int, int>> spans;
    for (int m = 0; m < layout.num_modalities(); ++m) spans.push_back({m, lengths[size_t(m)]});
    return with_order(layout, spans);
}

TokenSequence TokenSequence::with_order(const ModalityLayout& layout,
                                        const std::vector<std::pair<int, int>>& spans) {
    TokenSequence s;
    s.lengths.assign(size_t(layout.num_modalities()), 0);
    for (auto [m, len] : spans) {
        if (m < 0 || m >= layout.num_modalities()) fail(errc::invalid_layout, "span modality id");
        if (len < 0) fail(errc::invalid_layout, "negative span length");
        s.lengths[size_t(m)] += len;
        for (int i = 0; i < len; ++i) {
            s.indices.push_back(layout.mask_index);
            s.position_modality.push_back(m);
        }
    }
    return s;
}

void TokenSequence::validate(const ModalityLayout& layout) const {
    if (indices.size() != position_modality.size())
        fail(errc::invalid_layout, "indices/position_modality size mismatch");
    for (size_t p = 0; p < indices.size(); ++p) {
        int m = layout.modality_of(indices[p]); // range-checks
        if (m != kMaskModality && m != position_modality[p])
            fail(errc::invalid_layout,
                 "position " + std::to_string(p) + " holds a modality-" + std::to_string(m) +
                     " token but is assigned modality " + std::to_string(position_modality[p]));
    }
}

} // namespace fusediff
