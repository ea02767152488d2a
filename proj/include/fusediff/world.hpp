#pragma once

#include <string>
#include <vector>

#include "fusediff/layout.hpp"
#include "fusediff/rng.hpp"

namespace fusediff {

// Deterministic paired-token world: an 8x8 grid of color tokens (modality 0)
// captioned by a fixed-slot grammar (modality 1). The joint distribution is
// known, so cross-modal consistency of generated pairs is measurable.

inline constexpr int kNumShapes = 3; // square, cross, stripe

struct WorldConfig {
    int grid_rows = 8;
    int grid_cols = 8;
    int n_colors = 3;
    int n_shades = 5;
    int caption_len = 8;

    int grid_vocab() const { return 1 + n_colors * n_shades; }
    int word_vocab() const { return 1 + 2 * n_colors + kNumShapes + 2; }
    ModalityLayout layout() const;
    std::vector<int> lengths() const { return {grid_rows * grid_cols, caption_len}; }

    // caption word ids (modality-1 local; add the segment offset for fused ids)
    int word_article() const { return 0; }
    int word_color(int color, bool synonym) const {
        return 1 + color + (synonym ? n_colors : 0);
    }
    int word_shape(int shape) const { return 1 + 2 * n_colors + shape; }
    int word_filler() const { return 1 + 2 * n_colors + kNumShapes; }
    int word_pad() const { return word_filler() + 1; }

    // grid token ids (modality-0, offset 0)
    int grid_blank() const { return 0; }
    int grid_token(int color, int shade) const { return 1 + color * n_shades + shade; }
    int color_of_token(int token) const { return (token - 1) / n_shades; }

    void validate() const;
};

struct SceneSpec {
    int shape = 0; // 0 square, 1 cross, 2 stripe
    int color = 0;
    int shade = 0;
    int row = 0, col = 0; // placement anchor
    bool synonym = false; // color word choice
};

struct PairedRecord {
    std::vector<int> grid;    // fused indices in the modality-0 segment
    std::vector<int> caption; // fused indices in the modality-1 segment
    SceneSpec scene;

    TokenSequence to_sequence(const WorldConfig& world) const;
};

struct ConsistencyResult {
    bool consistent = false;
    int caption_color = -1, caption_shape = -1;
    int grid_color = -1, grid_shape = -1;
    double confidence = 0.0; // best template agreement (jaccard)
    std::string reason;
};

// Grid cells covered by a scene's shape at its placement.
std::vector<int> shape_cells(const SceneSpec& scene, const WorldConfig& world);

PairedRecord make_record(const SceneSpec& scene, const WorldConfig& world);

// i.i.d. scenes from per-record derived streams; identical seeds give
// bitwise-identical datasets.
std::vector<PairedRecord> generate_dataset(int n, uint64_t seed, const WorldConfig& world);

// Valid random caption, independent of any grid (the chance calibrator's
// counterpart draw).
std::vector<int> random_caption(const WorldConfig& world, Rng& rng);

// Lossless text grid: two lowercase hex digits per cell, "##" for mask.
std::string render_text(const std::vector<int>& grid, const WorldConfig& world,
                        const ModalityLayout& layout);
std::vector<int> parse_text(const std::string& text, const WorldConfig& world,
                            const ModalityLayout& layout);

// Plain portable pixmap (P3); mask cells come out magenta.
std::string render_ppm(const std::vector<int>& grid, const WorldConfig& world,
                       const ModalityLayout& layout);

// Caption grammar parse + grid template classification; consistent iff both
// succeed and agree on (shape, color).
ConsistencyResult consistency_check(const std::vector<int>& grid, const std::vector<int>& caption,
                                    const WorldConfig& world);

// Analytic chance rate for an independent valid caption against a clean grid.
double chance_rate(const WorldConfig& world);

// Monte Carlo calibration of the chance rate over `trials` independent pairs.
double mc_chance_rate(const WorldConfig& world, int trials, uint64_t seed);

// Line-delimited dataset file with a layout-describing header.
void save_dataset(const std::string& path, const std::vector<PairedRecord>& records,
                  const WorldConfig& world);
std::vector<PairedRecord> load_dataset(const std::string& path, const WorldConfig& world);

} // namespace fusediff
