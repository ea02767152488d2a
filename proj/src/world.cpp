#include "fusediff/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fusediff/errors.hpp"

namespace fusediff {

ModalityLayout WorldConfig::layout() const {
    validate();
    return ModalityLayout::create({grid_vocab(), word_vocab()});
}

void WorldConfig::validate() const {
    if (grid_rows < 5 || grid_cols < 5)
        fail(errc::config, "world grid must be at least 5x5 to place shapes");
    if (n_colors < 2 || n_shades < 1) fail(errc::config, "world needs >= 2 colors and >= 1 shade");
    if (caption_len < 4) fail(errc::config, "caption needs at least 4 slots");
}

TokenSequence PairedRecord::to_sequence(const WorldConfig& world) const {
    const auto layout = world.layout();
    auto seq = TokenSequence::all_mask(layout, world.lengths());
    for (size_t i = 0; i < grid.size(); ++i) seq.indices[i] = grid[i];
    for (size_t i = 0; i < caption.size(); ++i) seq.indices[grid.size() + i] = caption[i];
    seq.validate(layout);
    return seq;
}

std::vector<int> shape_cells(const SceneSpec& scene, const WorldConfig& world) {
    std::vector<int> cells;
    const int R = world.grid_rows, C = world.grid_cols;
    auto push = [&](int r, int c) { cells.push_back(r * C + c); };
    switch (scene.shape) {
        case 0: // 4x4 square anchored at its top-left corner
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) push(scene.row + r, scene.col + c);
            break;
        case 1: // plus sign with arm length 2 around a center
            for (int k = -2; k <= 2; ++k) push(scene.row + k, scene.col);
            for (int k = -2; k <= 2; ++k)
                if (k != 0) push(scene.row, scene.col + k);
            break;
        case 2: // two full-width rows
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < C; ++c) push(scene.row + r, c);
            break;
        default: fail(errc::config, "unknown shape id");
    }
    for (int cell : cells)
        if (cell < 0 || cell >= R * C) fail(errc::config, "shape placement out of bounds");
    return cells;
}

PairedRecord make_record(const SceneSpec& scene, const WorldConfig& world) {
    const auto layout = world.layout();
    PairedRecord rec;
    rec.scene = scene;
    rec.grid.assign(size_t(world.grid_rows * world.grid_cols), world.grid_blank());
    for (int cell : shape_cells(scene, world))
        rec.grid[size_t(cell)] = world.grid_token(scene.color, scene.shade);
    const int off = layout.segment_begin(1);
    rec.caption.assign(size_t(world.caption_len), off + world.word_pad());
    rec.caption[0] = off + world.word_article();
    rec.caption[1] = off + world.word_color(scene.color, scene.synonym);
    rec.caption[2] = off + world.word_shape(scene.shape);
    rec.caption[3] = off + world.word_filler();
    return rec;
}

namespace {

SceneSpec random_scene(const WorldConfig& world, Rng& rng) {
    SceneSpec s;
    s.shape = std::min(int(uniform01(rng) * kNumShapes), kNumShapes - 1);
    s.color = std::min(int(uniform01(rng) * world.n_colors), world.n_colors - 1);
    s.shade = std::min(int(uniform01(rng) * world.n_shades), world.n_shades - 1);
    s.synonym = uniform01(rng) < 0.5;
    const int R = world.grid_rows, C = world.grid_cols;
    switch (s.shape) {
        case 0:
            s.row = std::min(int(uniform01(rng) * (R - 3)), R - 4);
            s.col = std::min(int(uniform01(rng) * (C - 3)), C - 4);
            break;
        case 1:
            s.row = 2 + std::min(int(uniform01(rng) * (R - 4)), R - 5);
            s.col = 2 + std::min(int(uniform01(rng) * (C - 4)), C - 5);
            break;
        default:
            s.row = std::min(int(uniform01(rng) * (R - 1)), R - 2);
            s.col = 0;
            break;
    }
    return s;
}

} // namespace

std::vector<PairedRecord> generate_dataset(int n, uint64_t seed, const WorldConfig& world) {
    if (n < 1) fail(errc::config, "dataset size must be >= 1");
    world.validate();
    std::vector<PairedRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        auto rng = derive_rng(seed, {0xDA7Aull, uint64_t(i)});
        out.push_back(make_record(random_scene(world, rng), world));
    }
    return out;
}

std::vector<int> random_caption(const WorldConfig& world, Rng& rng) {
    SceneSpec s;
    s.shape = std::min(int(uniform01(rng) * kNumShapes), kNumShapes - 1);
    s.color = std::min(int(uniform01(rng) * world.n_colors), world.n_colors - 1);
    s.synonym = uniform01(rng) < 0.5;
    s.row = 2; // caption ignores placement; keep the spec valid for any shape
    s.col = 2;
    return make_record(s, world).caption;
}

std::string render_text(const std::vector<int>& grid, const WorldConfig& world,
                        const ModalityLayout& layout) {
    if (int(grid.size()) != world.grid_rows * world.grid_cols)
        fail(errc::render, "grid token count does not match world dimensions");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (int r = 0; r < world.grid_rows; ++r) {
        for (int c = 0; c < world.grid_cols; ++c) {
            const int tok = grid[size_t(r * world.grid_cols + c)];
            if (tok == layout.mask_index) {
                out += "##";
            } else {
                if (tok < 0 || tok >= world.grid_vocab() || tok > 255)
                    fail(errc::render, "token " + std::to_string(tok) + " is not a grid token");
                out += digits[(tok >> 4) & 0xf];
                out += digits[tok & 0xf];
            }
        }
        out += '\n';
    }
    return out;
}

std::vector<int> parse_text(const std::string& text, const WorldConfig& world,
                            const ModalityLayout& layout) {
    std::vector<int> grid;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (int(line.size()) != 2 * world.grid_cols) fail(errc::render, "grid line width mismatch");
        for (int c = 0; c < world.grid_cols; ++c) {
            const std::string cell = line.substr(size_t(2 * c), 2);
            if (cell == "##") {
                grid.push_back(layout.mask_index);
                continue;
            }
            int v = 0;
            for (char ch : cell) {
                int d;
                if (ch >= '0' && ch <= '9')
                    d = ch - '0';
                else if (ch >= 'a' && ch <= 'f')
                    d = 10 + ch - 'a';
                else
                    fail(errc::render, "bad grid cell '" + cell + "'");
                v = v * 16 + d;
            }
            if (v >= world.grid_vocab()) fail(errc::render, "cell value outside grid vocabulary");
            grid.push_back(v);
        }
    }
    if (int(grid.size()) != world.grid_rows * world.grid_cols)
        fail(errc::render, "grid row count mismatch");
    return grid;
}

namespace {

void hsv_to_rgb(double h, double s, double v, int& r, int& g, int& b) {
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double rr = 0, gg = 0, bb = 0;
    if (hp < 1) {
        rr = c; gg = x;
    } else if (hp < 2) {
        rr = x; gg = c;
    } else if (hp < 3) {
        gg = c; bb = x;
    } else if (hp < 4) {
        gg = x; bb = c;
    } else if (hp < 5) {
        rr = x; bb = c;
    } else {
        rr = c; bb = x;
    }
    const double m = v - c;
    r = int(std::lround((rr + m) * 255));
    g = int(std::lround((gg + m) * 255));
    b = int(std::lround((bb + m) * 255));
}

} // namespace

std::string render_ppm(const std::vector<int>& grid, const WorldConfig& world,
                       const ModalityLayout& layout) {
    if (int(grid.size()) != world.grid_rows * world.grid_cols)
        fail(errc::render, "grid token count does not match world dimensions");
    std::ostringstream out;
    out << "P3\n" << world.grid_cols << ' ' << world.grid_rows << "\n255\n";
    for (int r = 0; r < world.grid_rows; ++r) {
        for (int c = 0; c < world.grid_cols; ++c) {
            const int tok = grid[size_t(r * world.grid_cols + c)];
            int rr, gg, bb;
            if (tok == layout.mask_index) {
                rr = 255; gg = 0; bb = 255;
            } else if (tok == world.grid_blank()) {
                rr = gg = bb = 245;
            } else if (tok > 0 && tok < world.grid_vocab()) {
                const int color = world.color_of_token(tok);
                const int shade = (tok - 1) % world.n_shades;
                hsv_to_rgb(360.0 * color / world.n_colors, 0.75,
                           0.45 + 0.55 * (shade + 1) / world.n_shades, rr, gg, bb);
            } else {
                fail(errc::render, "token " + std::to_string(tok) + " is not a grid token");
            }
            out << rr << ' ' << gg << ' ' << bb << (c + 1 == world.grid_cols ? "" : "  ");
        }
        out << '\n';
    }
    return out.str();
}

ConsistencyResult consistency_check(const std::vector<int>& grid, const std::vector<int>& caption,
                                    const WorldConfig& world) {
    const auto layout = world.layout();
    ConsistencyResult res;

    // caption grammar: [article][color][shape][filler][pad...]
    const int off = layout.segment_begin(1);
    auto local = [&](size_t slot) -> int {
        const int tok = caption[slot];
        if (tok == layout.mask_index) return -1;
        if (tok < off || tok >= layout.segment_end(1)) return -2;
        return tok - off;
    };
    if (int(caption.size()) != world.caption_len) {
        res.reason = "caption length mismatch";
        return res;
    }
    for (size_t i = 0; i < caption.size(); ++i) {
        if (local(i) == -1) {
            res.reason = "caption contains mask tokens";
            return res;
        }
        if (local(i) == -2) {
            res.reason = "caption contains non-word tokens";
            return res;
        }
    }
    bool parse_ok = local(0) == world.word_article() && local(3) == world.word_filler();
    for (size_t i = 4; i < caption.size() && parse_ok; ++i)
        if (local(i) != world.word_pad()) parse_ok = false;
    const int cw = local(1);
    if (parse_ok && cw >= 1 && cw <= 2 * world.n_colors)
        res.caption_color = (cw - 1) % world.n_colors;
    else
        parse_ok = false;
    const int sw = local(2);
    if (parse_ok && sw >= world.word_shape(0) && sw < world.word_shape(0) + kNumShapes)
        res.caption_shape = sw - world.word_shape(0);
    else
        parse_ok = false;
    if (!parse_ok) {
        res.reason = "caption does not follow the grammar";
        return res;
    }

    // grid classification: majority color + best-jaccard shape template
    if (int(grid.size()) != world.grid_rows * world.grid_cols) {
        res.reason = "grid length mismatch";
        return res;
    }
    std::set<int> nonblank;
    std::vector<int> color_votes(size_t(world.n_colors), 0);
    for (size_t i = 0; i < grid.size(); ++i) {
        const int tok = grid[i];
        if (tok == layout.mask_index) {
            res.reason = "grid contains mask tokens";
            return res;
        }
        if (tok < 0 || tok >= world.grid_vocab()) {
            res.reason = "grid contains non-grid tokens";
            return res;
        }
        if (tok == world.grid_blank()) continue;
        nonblank.insert(int(i));
        color_votes[size_t(world.color_of_token(tok))]++;
    }
    if (nonblank.empty()) {
        res.reason = "grid is blank";
        return res;
    }
    res.grid_color =
        int(std::max_element(color_votes.begin(), color_votes.end()) - color_votes.begin());
    const double purity = double(color_votes[size_t(res.grid_color)]) / double(nonblank.size());

    auto jaccard = [&](const std::vector<int>& cells) {
        int inter = 0;
        for (int cell : cells) inter += nonblank.count(cell) ? 1 : 0;
        const int uni = int(cells.size()) + int(nonblank.size()) - inter;
        return uni == 0 ? 0.0 : double(inter) / double(uni);
    };
    double best = -1.0;
    int best_shape = -1;
    auto consider = [&](const SceneSpec& sc) {
        const double j = jaccard(shape_cells(sc, world));
        if (j > best) {
            best = j;
            best_shape = sc.shape;
        }
    };
    SceneSpec probe;
    probe.shape = 0;
    for (probe.row = 0; probe.row + 4 <= world.grid_rows; ++probe.row)
        for (probe.col = 0; probe.col + 4 <= world.grid_cols; ++probe.col) consider(probe);
    probe.shape = 1;
    for (probe.row = 2; probe.row + 3 <= world.grid_rows; ++probe.row)
        for (probe.col = 2; probe.col + 3 <= world.grid_cols; ++probe.col) consider(probe);
    probe.shape = 2;
    probe.col = 0;
    for (probe.row = 0; probe.row + 2 <= world.grid_rows; ++probe.row) consider(probe);
    {
        // a solid grid reads as the stripe template at full height
        std::vector<int> all_cells;
        for (int i = 0; i < world.grid_rows * world.grid_cols; ++i) all_cells.push_back(i);
        const double j = jaccard(all_cells);
        if (j > best) {
            best = j;
            best_shape = 2;
        }
    }
    res.grid_shape = best_shape;
    res.confidence = best * purity;
    res.consistent = (res.grid_color == res.caption_color) && (res.grid_shape == res.caption_shape);
    if (!res.consistent) res.reason = "caption and grid disagree";
    return res;
}

double chance_rate(const WorldConfig& world) { return 1.0 / (kNumShapes * world.n_colors); }

double mc_chance_rate(const WorldConfig& world, int trials, uint64_t seed) {
    if (trials < 1) fail(errc::config, "trials must be >= 1");
    int hits = 0;
    for (int i = 0; i < trials; ++i) {
        auto grid_rng = derive_rng(seed, {0x9e1dull, uint64_t(i)});
        auto cap_rng = derive_rng(seed, {0xca97ull, uint64_t(i)});
        const PairedRecord rec = make_record(random_scene(world, grid_rng), world);
        const auto caption = random_caption(world, cap_rng);
        if (consistency_check(rec.grid, caption, world).consistent) ++hits;
    }
    return double(hits) / trials;
}

void save_dataset(const std::string& path, const std::vector<PairedRecord>& records,
                  const WorldConfig& world) {
    std::ofstream out(path);
    if (!out) fail(errc::io, "cannot open '" + path + "' for writing");
    out << "# fusediff-dataset v1 sizes=" << world.grid_vocab() << ',' << world.word_vocab()
        << " lengths=" << world.grid_rows * world.grid_cols << ',' << world.caption_len << '\n';
    for (const auto& rec : records) {
        bool first = true;
        for (int tok : rec.grid) {
            out << (first ? "" : " ") << tok;
            first = false;
        }
        for (int tok : rec.caption) out << ' ' << tok;
        out << '\n';
    }
    if (!out) fail(errc::io, "failed writing dataset to '" + path + "'");
}

std::vector<PairedRecord> load_dataset(const std::string& path, const WorldConfig& world) {
    std::ifstream in(path);
    if (!in) fail(errc::io, "cannot open dataset '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) fail(errc::dataset_format, "empty dataset file");
    std::ostringstream want;
    want << "# fusediff-dataset v1 sizes=" << world.grid_vocab() << ',' << world.word_vocab()
         << " lengths=" << world.grid_rows * world.grid_cols << ',' << world.caption_len;
    if (header != want.str())
        fail(errc::dataset_format, "dataset header does not match the configured world: " + header);
    const int n_grid = world.grid_rows * world.grid_cols;
    std::vector<PairedRecord> out;
    std::string line;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        PairedRecord rec;
        int tok;
        while (ls >> tok) {
            if (int(rec.grid.size()) < n_grid)
                rec.grid.push_back(tok);
            else
                rec.caption.push_back(tok);
        }
        if (int(rec.grid.size()) != n_grid || int(rec.caption.size()) != world.caption_len)
            fail(errc::dataset_format, "line " + std::to_string(line_no) + " has wrong token count");
        rec.to_sequence(world); // validates segment membership
        out.push_back(std::move(rec));
    }
    if (out.empty()) fail(errc::dataset_format, "dataset has no records");
    return out;
}

} // namespace fusediff
