// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "linedet/matching.hpp"
#include "linedet/rng.hpp"
#include "linedet/tensor.hpp"

namespace linedet {

/// One dataset element: a grayscale page in [0,1] plus its normalized
/// ground-truth line boxes.
template <typename T>
struct PageSample {
    Tensor<T> image;
    std::vector<BoxTarget> targets;
    std::string name;
};

struct IntRange {
    int lo = 0, hi = 0;
};
struct RealRange {
    double lo = 0, hi = 0;
};

/// Knobs of the synthetic page generator. Pages are light noisy backgrounds
/// with dark word blobs arranged into non-overlapping horizontal lines; one
/// tight target box per line. All pixel quantities are in pixels.
struct SynthSpec {
    IntRange page_height{200, 256};
    IntRange page_width{144, 192};
    IntRange lines{1, 30};
    IntRange line_height{4, 8};
    IntRange line_gap{2, 6};
    IntRange words{2, 5};
    IntRange word_width{8, 24};
    IntRange word_gap{2, 5};
    IntRange indent{0, 40};
    int margin = 3;
    RealRange background{0.85, 1.0};
    RealRange ink{0.0, 0.3};
    double noise = 0.05;

    void validate() const {
        auto ordered = [](const IntRange& r) { return r.lo <= r.hi && r.lo >= 0; };
        if (!ordered(page_height) || !ordered(page_width) || !ordered(lines) ||
            !ordered(line_height) || !ordered(line_gap) || !ordered(words) ||
            !ordered(word_width) || !ordered(word_gap) || !ordered(indent))
            throw std::invalid_argument("synth spec: every range needs 0 <= lo <= hi");
        if (line_height.lo < 1 || word_width.lo < 1 || words.lo < 1)
            throw std::invalid_argument("synth spec: line height, word width and word count must be >= 1");
        if (margin < 1) throw std::invalid_argument("synth spec: margin must be >= 1");
        if (background.lo > background.hi || ink.lo > ink.hi || noise < 0)
            throw std::invalid_argument("synth spec: bad intensity ranges");
        if (2 * margin + indent.hi + word_width.lo >= page_width.lo)
            throw std::invalid_argument("synth spec: pages too narrow for one word at max indent");
    }
};

/// Builds one page. Vertical layout: the sampled line count must fit the
/// sampled page at minimum heights and gaps, otherwise the spec is rejected.
template <typename T>
PageSample<T> generate_page(const SynthSpec& spec, Rng& rng) {
    spec.validate();
    const int H = static_cast<int>(rng.uniform_int(spec.page_height.lo, spec.page_height.hi));
    const int W = static_cast<int>(rng.uniform_int(spec.page_width.lo, spec.page_width.hi));
    const int count = static_cast<int>(rng.uniform_int(spec.lines.lo, spec.lines.hi));

    const int usable = H - 2 * spec.margin;
    const int need_min =
        count * spec.line_height.lo + std::max(0, count - 1) * spec.line_gap.lo;
    if (count > 0 && need_min > usable)
        throw std::invalid_argument("synth spec infeasible: " + std::to_string(count) +
                                    " lines need " + std::to_string(need_min) +
                                    " rows, page has " + std::to_string(usable));

    PageSample<T> page;
    page.image = Tensor<T>(1, H, W);
    const double bg = rng.uniform(spec.background.lo, spec.background.hi);
    page.image.fill(static_cast<T>(bg));

    // spend the vertical slack on line-height and gap jitter, then on a
    // random top offset, so every draw still fits exactly
    int budget = count > 0 ? usable - need_min : 0;
    std::vector<int> heights(count), gaps(std::max(0, count - 1));
    for (int i = 0; i < count; ++i) {
        const int extra = static_cast<int>(
            rng.uniform_int(0, std::min(spec.line_height.hi - spec.line_height.lo, budget)));
        heights[i] = spec.line_height.lo + extra;
        budget -= extra;
    }
    for (int i = 0; i + 1 < count; ++i) {
        const int extra = static_cast<int>(
            rng.uniform_int(0, std::min(spec.line_gap.hi - spec.line_gap.lo, budget)));
        gaps[i] = spec.line_gap.lo + extra;
        budget -= extra;
    }
    int y = spec.margin + (count > 0 ? static_cast<int>(rng.uniform_int(0, budget)) : 0);

    for (int li = 0; li < count; ++li) {
        const int h = heights[li];
        int x = spec.margin + static_cast<int>(rng.uniform_int(spec.indent.lo, spec.indent.hi));
        const int n_words = static_cast<int>(rng.uniform_int(spec.words.lo, spec.words.hi));
        int x0 = -1, x1 = -1;
        for (int wi = 0; wi < n_words; ++wi) {
            int ww = static_cast<int>(rng.uniform_int(spec.word_width.lo, spec.word_width.hi));
            if (x + ww > W - spec.margin) {
                ww = W - spec.margin - x;
                if (ww < 1) break;
            }
            const double ink = rng.uniform(spec.ink.lo, spec.ink.hi);
            for (int yy = y; yy < y + h; ++yy)
                for (int xx = x; xx < x + ww; ++xx) page.image.at(0, yy, xx) = static_cast<T>(ink);
            if (x0 < 0) x0 = x;
            x1 = x + ww;
            x += ww + static_cast<int>(rng.uniform_int(spec.word_gap.lo, spec.word_gap.hi));
            if (x >= W - spec.margin) break;
        }
        if (x0 < 0) {
            // indentation left no room; fall back to the margin so the line
            // always carries at least one word
            x0 = spec.margin;
            x1 = x0 + spec.word_width.lo;
            const double ink = rng.uniform(spec.ink.lo, spec.ink.hi);
            for (int yy = y; yy < y + h; ++yy)
                for (int xx = x0; xx < x1; ++xx) page.image.at(0, yy, xx) = static_cast<T>(ink);
        }
        BoxTarget t;
        t.x = static_cast<double>(x0) / W;
        t.y = static_cast<double>(y) / H;
        t.w = static_cast<double>(x1 - x0) / W;
        t.h = static_cast<double>(h) / H;
        page.targets.push_back(t);
        y += h + (li + 1 < count ? gaps[li] : 0);
    }

    if (spec.noise > 0) {
        for (T& v : page.image.data) {
            const double n = rng.uniform(-spec.noise, spec.noise);
            v = static_cast<T>(std::clamp(static_cast<double>(v) + n, 0.0, 1.0));
        }
    }
    return page;
}

// ---------------------------------------------------------------------------
// Synth spec text format: one "key lo hi" (or "key value") per line.
// ---------------------------------------------------------------------------

inline SynthSpec parse_synth_spec(const std::string& text) {
    SynthSpec spec;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        auto read_int_range = [&](IntRange& r) {
            if (!(ls >> r.lo >> r.hi))
                throw std::invalid_argument("synth spec line " + std::to_string(line_no) + ": '" +
                                            key + "' expects two integers");
        };
        auto read_real_range = [&](RealRange& r) {
            if (!(ls >> r.lo >> r.hi))
                throw std::invalid_argument("synth spec line " + std::to_string(line_no) + ": '" +
                                            key + "' expects two numbers");
        };
        if (key == "page_height") read_int_range(spec.page_height);
        else if (key == "page_width") read_int_range(spec.page_width);
        else if (key == "lines") read_int_range(spec.lines);
        else if (key == "line_height") read_int_range(spec.line_height);
        else if (key == "line_gap") read_int_range(spec.line_gap);
        else if (key == "words") read_int_range(spec.words);
        else if (key == "word_width") read_int_range(spec.word_width);
        else if (key == "word_gap") read_int_range(spec.word_gap);
        else if (key == "indent") read_int_range(spec.indent);
        else if (key == "margin") {
            if (!(ls >> spec.margin))
                throw std::invalid_argument("synth spec line " + std::to_string(line_no) +
                                            ": 'margin' expects one integer");
        } else if (key == "background") read_real_range(spec.background);
        else if (key == "ink") read_real_range(spec.ink);
        else if (key == "noise") {
            if (!(ls >> spec.noise))
                throw std::invalid_argument("synth spec line " + std::to_string(line_no) +
                                            ": 'noise' expects one number");
        } else {
            throw std::invalid_argument("synth spec line " + std::to_string(line_no) +
                                        ": unknown key '" + key + "'");
        }
        std::string extra;
        if (ls >> extra)
            throw std::invalid_argument("synth spec line " + std::to_string(line_no) +
                                        ": trailing token '" + extra + "'");
    }
    spec.validate();
    return spec;
}

inline SynthSpec load_synth_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open synth spec '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_synth_spec(ss.str());
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, 8-bit) image IO.
// ---------------------------------------------------------------------------

namespace detail {

inline int pgm_read_value(const std::vector<std::uint8_t>& bytes, std::size_t& pos,
                          const std::string& path) {
    // skip whitespace and '#' comments
    while (pos < bytes.size()) {
        const char c = static_cast<char>(bytes[pos]);
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= bytes.size())
        throw std::runtime_error(path + ": truncated PGM header at byte " + std::to_string(pos));
    if (!std::isdigit(static_cast<unsigned char>(bytes[pos])))
        throw std::runtime_error(path + ": corrupt PGM header at byte " + std::to_string(pos));
    int v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
        v = v * 10 + (bytes[pos] - '0');
        ++pos;
    }
    return v;
}

}  // namespace detail

/// Loads a binary 8-bit PGM (P5) as a single-channel tensor scaled to [0,1].
/// Color or ASCII Netpbm variants are rejected.
template <typename T>
Tensor<T> load_pgm(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 2)
        throw std::runtime_error(path + ": not a PGM file (shorter than its magic)");
    if (bytes[0] != 'P' || bytes[1] != '5') {
        const std::string magic{static_cast<char>(bytes[0]), static_cast<char>(bytes[1])};
        if (magic == "P6")
            throw std::runtime_error(path + ": P6 color images are not supported; " +
                                     "inputs must be grayscale P5");
        throw std::runtime_error(path + ": unsupported format '" + magic +
                                 "' at byte 0 (want binary P5)");
    }
    std::size_t pos = 2;
    const int w = detail::pgm_read_value(bytes, pos, path);
    const int h = detail::pgm_read_value(bytes, pos, path);
    const int maxval = detail::pgm_read_value(bytes, pos, path);
    if (w < 1 || h < 1)
        throw std::runtime_error(path + ": bad PGM dimensions " + std::to_string(w) + "x" +
                                 std::to_string(h));
    if (maxval < 1 || maxval > 255)
        throw std::runtime_error(path + ": PGM maxval " + std::to_string(maxval) +
                                 " unsupported (8-bit only)");
    ++pos;  // single whitespace byte after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h;
    if (bytes.size() - pos < need)
        throw std::runtime_error(path + ": truncated pixel payload, expected " +
                                 std::to_string(need) + " bytes, got " +
                                 std::to_string(bytes.size() - pos));
    Tensor<T> img(1, h, w);
    for (std::size_t i = 0; i < need; ++i)
        img.data[i] = static_cast<T>(bytes[pos + i] / static_cast<double>(maxval));
    return img;
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& img) {
    if (img.channels != 1)
        throw std::invalid_argument("write_pgm: image must have one channel, got " +
                                    img.shape_str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
        row[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

/// Bilinear rescale to the given width, preserving aspect ratio. A page that
/// is already at the target width is returned unchanged.
template <typename T>
Tensor<T> width_normalize(const Tensor<T>& img, int target_width) {
    if (target_width < 1) throw std::invalid_argument("width_normalize: target width must be >= 1");
    if (img.width == target_width) return img;
    const int out_w = target_width;
    const int out_h = std::max(
        1, static_cast<int>(std::lround(static_cast<double>(img.height) * target_width / img.width)));
    Tensor<T> out(img.channels, out_h, out_w);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, img.width - 1);
                const double wx = fx - x0;
                const double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
                const double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<T>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                 wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset: <stem>.pgm + <stem>.boxes, one "x y w h" line per target.
// ---------------------------------------------------------------------------

inline std::vector<BoxTarget> read_boxes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open box file '" + path + "'");
    std::vector<BoxTarget> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        BoxTarget t;
        if (!(ls >> t.x)) continue;  // blank or comment-only line
        if (!(ls >> t.y >> t.w >> t.h))
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected 4 numbers 'x y w h'");
        std::string extra;
        if (ls >> extra)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": trailing token '" +
                                     extra + "'");
        out.push_back(t);
    }
    return out;
}

inline void write_boxes(const std::string& path, const std::vector<BoxTarget>& targets) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    char buf[128];
    for (const auto& t : targets) {
        std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f\n", t.x, t.y, t.w, t.h);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

template <typename T>
void write_sample(const std::string& dir, const std::string& stem, const PageSample<T>& page) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_pgm(dir + "/" + stem + ".pgm", page.image);
    write_boxes(dir + "/" + stem + ".boxes", page.targets);
}

/// Loads every .pgm/.boxes pair in lexicographic stem order. A .pgm without
/// its .boxes sibling (or vice versa) is skipped with a warning.
template <typename T>
std::vector<PageSample<T>> load_dataset(const std::string& dir, std::ostream* warnings = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory '" + dir + "' not found");
    std::vector<std::string> stems;
    std::vector<std::string> orphan_boxes;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto p = entry.path();
        if (p.extension() == ".pgm") stems.push_back(p.stem().string());
        else if (p.extension() == ".boxes") orphan_boxes.push_back(p.stem().string());
    }
    std::sort(stems.begin(), stems.end());
    std::sort(orphan_boxes.begin(), orphan_boxes.end());
    for (const auto& s : orphan_boxes) {
        if (!std::binary_search(stems.begin(), stems.end(), s) && warnings)
            *warnings << "warning: " << dir << "/" << s << ".boxes has no image; skipped\n";
    }
    std::vector<PageSample<T>> out;
    for (const auto& stem : stems) {
        const std::string img_path = dir + "/" + stem + ".pgm";
        const std::string box_path = dir + "/" + stem + ".boxes";
        if (!fs::exists(box_path)) {
            if (warnings)
                *warnings << "warning: " << img_path << " has no box file; skipped\n";
            continue;
        }
        PageSample<T> page;
        page.image = load_pgm<T>(img_path);
        page.targets = read_boxes(box_path);
        page.name = stem;
        out.push_back(std::move(page));
    }
    return out;
}

}  // namespace linedet
