// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace linedet {

enum class LayerType { Conv, MdLstm, Dropout };

struct LayerSpec {
    LayerType type = LayerType::Conv;
    // conv fields
    int out_channels = 0;
    int kernel_h = 0, kernel_w = 0;
    int stride_y = 1, stride_x = 1;
    // dropout field
    double dropout_p = 0.0;
};

/// Per-layer shape entry of the feature-map chain, head included.
struct MapDims {
    int channels = 0, height = 0, width = 0;
};

/// Declarative network description. The feature layers are listed in order;
/// the output head (a 1x1 convolution with 5*predictors channels) is implied
/// by the `output` section and always sits last. The reference input size
/// anchors the normalized coordinate system; it does not constrain the sizes
/// the network can run on.
struct ArchitectureConfig {
    int input_channels = 1;
    int reference_height = 0;
    int reference_width = 0;
    std::vector<LayerSpec> layers;
    int predictors = 0;  // K box predictors per output site
    std::optional<std::array<double, 4>> lambda_override;

    int head_in_channels() const {
        int c = input_channels;
        for (const auto& l : layers)
            if (l.type == LayerType::Conv) c = l.out_channels;
        return c;
    }

    int head_out_channels() const { return 5 * predictors; }

    void validate() const {
        if (input_channels < 1)
            throw std::invalid_argument("arch config: input channels must be >= 1");
        if (reference_height < 1 || reference_width < 1)
            throw std::invalid_argument("arch config: reference size must be positive");
        if (predictors < 1)
            throw std::invalid_argument("arch config: output section with predictors >= 1 required");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string where = "arch config: layer " + std::to_string(i + 1);
            switch (l.type) {
                case LayerType::Conv:
                    if (l.out_channels < 1 || l.kernel_h < 1 || l.kernel_w < 1 ||
                        l.stride_y < 1 || l.stride_x < 1)
                        throw std::invalid_argument(where + ": conv fields must be >= 1");
                    break;
                case LayerType::Dropout:
                    if (l.dropout_p < 0.0 || l.dropout_p >= 1.0)
                        throw std::invalid_argument(where + ": dropout p must lie in [0, 1)");
                    break;
                case LayerType::MdLstm:
                    break;
            }
        }
    }

    /// Feature-map chain for a given input size, one entry per layer plus a
    /// final entry for the head output. Throws when a convolution would
    /// produce an empty map, naming the minimal admissible input.
    std::vector<MapDims> map_dims(int in_h, int in_w) const {
        std::vector<MapDims> out;
        int c = input_channels, h = in_h, w = in_w;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.type == LayerType::Conv) {
                if (h < l.kernel_h || w < l.kernel_w) {
                    const auto [mh, mw] = min_input_size();
                    throw std::invalid_argument(
                        "input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                        " too small at layer " + std::to_string(i + 1) +
                        "; minimal admissible input is " + std::to_string(mh) + "x" +
                        std::to_string(mw));
                }
                h = (h - l.kernel_h) / l.stride_y + 1;
                w = (w - l.kernel_w) / l.stride_x + 1;
                c = l.out_channels;
            }
            out.push_back({c, h, w});
        }
        out.push_back({head_out_channels(), h, w});  // 1x1 head
        return out;
    }

    /// Smallest input that keeps every feature map at least 1x1.
    std::pair<int, int> min_input_size() const {
        int h = 1, w = 1;
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
            if (it->type != LayerType::Conv) continue;
            h = (h - 1) * it->stride_y + it->kernel_h;
            w = (w - 1) * it->stride_x + it->kernel_w;
        }
        return {h, w};
    }

    /// Product of the convolution strides: the pixel step between
    /// neighbouring sites of the last feature map.
    std::pair<int, int> stride_product() const {
        int sy = 1, sx = 1;
        for (const auto& l : layers) {
            if (l.type != LayerType::Conv) continue;
            sy *= l.stride_y;
            sx *= l.stride_x;
        }
        return {sy, sx};
    }
};

namespace detail {

struct Token {
    std::string text;
    int line = 0;
};

inline std::vector<Token> tokenize_config(const std::string& text) {
    std::vector<Token> out;
    std::string cur;
    int line = 1, cur_line = 1;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back({cur, cur_line});
            cur.clear();
        }
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (ch == '#') {
            flush();
            while (i < text.size() && text[i] != '\n') ++i;
            ++line;
            continue;
        }
        if (ch == '\n') {
            flush();
            ++line;
            continue;
        }
        if (ch == ' ' || ch == '\t' || ch == '\r') {
            flush();
            continue;
        }
        if (ch == '{' || ch == '}') {
            flush();
            out.push_back({std::string(1, ch), line});
            continue;
        }
        if (cur.empty()) cur_line = line;
        cur.push_back(ch);
    }
    flush();
    return out;
}

inline long parse_int_field(const Token& t, const std::string& ctx) {
    try {
        std::size_t pos = 0;
        long v = std::stol(t.text, &pos);
        if (pos != t.text.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("arch config line " + std::to_string(t.line) + ": " + ctx +
                                    " expects an integer, got '" + t.text + "'");
    }
}

inline double parse_real_field(const Token& t, const std::string& ctx) {
    try {
        std::size_t pos = 0;
        double v = std::stod(t.text, &pos);
        if (pos != t.text.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::invalid_argument("arch config line " + std::to_string(t.line) + ": " + ctx +
                                    " expects a number, got '" + t.text + "'");
    }
}

}  // namespace detail

/// Parses the textual architecture format. Sections in order, e.g.:
///
///   input   { channels 1  reference 598 838 }   # reference is height width
///   conv    { filters 12  kernel 4 4  stride 3 3 }
///   mdlstm  { }
///   dropout { p 0.5 }
///   output  { predictors 20 }
///   lambda  { 0.0573 0.7224 1.0 1.0 }            # optional scale override
inline ArchitectureConfig parse_arch_config(const std::string& text) {
    using detail::Token;
    auto tokens = detail::tokenize_config(text);
    ArchitectureConfig cfg;
    bool saw_input = false, saw_output = false;
    std::size_t i = 0;

    auto expect = [&](const char* what) -> const Token& {
        if (i >= tokens.size())
            throw std::invalid_argument(std::string("arch config: unexpected end of file, expected ") +
                                        what);
        return tokens[i];
    };
    auto expect_brace = [&](char b) {
        const Token& t = expect(b == '{' ? "'{'" : "'}'");
        if (t.text.size() != 1 || t.text[0] != b)
            throw std::invalid_argument("arch config line " + std::to_string(t.line) +
                                        ": expected '" + std::string(1, b) + "', got '" + t.text +
                                        "'");
        ++i;
    };

    while (i < tokens.size()) {
        const Token section = tokens[i++];
        expect_brace('{');
        std::vector<Token> fields;
        while (true) {
            const Token& t = expect("'}'");
            if (t.text == "}") {
                ++i;
                break;
            }
            fields.push_back(t);
            ++i;
        }
        auto field_at = [&](std::size_t idx, const char* ctx) -> const Token& {
            if (idx >= fields.size())
                throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                            ": section '" + section.text + "' is missing " + ctx);
            return fields[idx];
        };

        if (section.text == "input") {
            std::size_t j = 0;
            while (j < fields.size()) {
                const std::string key = fields[j].text;
                if (key == "channels") {
                    cfg.input_channels =
                        static_cast<int>(detail::parse_int_field(field_at(j + 1, "channels"), "channels"));
                    j += 2;
                } else if (key == "reference") {
                    cfg.reference_height = static_cast<int>(
                        detail::parse_int_field(field_at(j + 1, "reference height"), "reference"));
                    cfg.reference_width = static_cast<int>(
                        detail::parse_int_field(field_at(j + 2, "reference width"), "reference"));
                    j += 3;
                } else {
                    throw std::invalid_argument("arch config line " + std::to_string(fields[j].line) +
                                                ": unknown input field '" + key + "'");
                }
            }
            saw_input = true;
        } else if (section.text == "conv") {
            if (saw_output)
                throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                            ": layers must precede the output section");
            LayerSpec l;
            l.type = LayerType::Conv;
            std::size_t j = 0;
            while (j < fields.size()) {
                const std::string key = fields[j].text;
                if (key == "filters") {
                    l.out_channels =
                        static_cast<int>(detail::parse_int_field(field_at(j + 1, "filters"), "filters"));
                    j += 2;
                } else if (key == "kernel") {
                    l.kernel_h =
                        static_cast<int>(detail::parse_int_field(field_at(j + 1, "kernel height"), "kernel"));
                    l.kernel_w =
                        static_cast<int>(detail::parse_int_field(field_at(j + 2, "kernel width"), "kernel"));
                    j += 3;
                } else if (key == "stride") {
                    l.stride_y =
                        static_cast<int>(detail::parse_int_field(field_at(j + 1, "stride y"), "stride"));
                    l.stride_x =
                        static_cast<int>(detail::parse_int_field(field_at(j + 2, "stride x"), "stride"));
                    j += 3;
                } else {
                    throw std::invalid_argument("arch config line " + std::to_string(fields[j].line) +
                                                ": unknown conv field '" + key + "'");
                }
            }
            cfg.layers.push_back(l);
        } else if (section.text == "mdlstm") {
            if (!fields.empty())
                throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                            ": mdlstm takes no fields");
            LayerSpec l;
            l.type = LayerType::MdLstm;
            cfg.layers.push_back(l);
        } else if (section.text == "dropout") {
            LayerSpec l;
            l.type = LayerType::Dropout;
            if (fields.size() != 2 || fields[0].text != "p")
                throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                            ": dropout expects exactly 'p <value>'");
            l.dropout_p = detail::parse_real_field(fields[1], "dropout p");
            cfg.layers.push_back(l);
        } else if (section.text == "output") {
            std::size_t j = 0;
            while (j < fields.size()) {
                const std::string key = fields[j].text;
                if (key == "predictors") {
                    cfg.predictors = static_cast<int>(
                        detail::parse_int_field(field_at(j + 1, "predictors"), "predictors"));
                    j += 2;
                } else if (key == "kernel" || key == "stride") {
                    // accepted for symmetry with conv sections, but the head must stay 1x1
                    const long a = detail::parse_int_field(field_at(j + 1, key.c_str()), key);
                    const long b = detail::parse_int_field(field_at(j + 2, key.c_str()), key);
                    if (a != 1 || b != 1)
                        throw std::invalid_argument(
                            "arch config line " + std::to_string(fields[j].line) +
                            ": the output head must be a 1x1 convolution with stride 1");
                    j += 3;
                } else {
                    throw std::invalid_argument("arch config line " + std::to_string(fields[j].line) +
                                                ": unknown output field '" + key + "'");
                }
            }
            saw_output = true;
        } else if (section.text == "lambda") {
            if (fields.size() != 4)
                throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                            ": lambda expects 4 values (x y w h)");
            std::array<double, 4> lam{};
            for (int k = 0; k < 4; ++k) lam[k] = detail::parse_real_field(fields[k], "lambda");
            cfg.lambda_override = lam;
        } else {
            throw std::invalid_argument("arch config line " + std::to_string(section.line) +
                                        ": unknown section '" + section.text + "'");
        }
    }
    if (!saw_input) throw std::invalid_argument("arch config: missing input section");
    if (!saw_output) throw std::invalid_argument("arch config: missing output section");
    cfg.validate();
    return cfg;
}

inline ArchitectureConfig load_arch_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open architecture config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_arch_config(ss.str());
}

/// Canonical text form; parse(format(cfg)) reproduces cfg exactly.
inline std::string format_arch_config(const ArchitectureConfig& cfg) {
    std::ostringstream out;
    out << "input { channels " << cfg.input_channels << "  reference " << cfg.reference_height
        << " " << cfg.reference_width << " }\n";
    for (const auto& l : cfg.layers) {
        switch (l.type) {
            case LayerType::Conv:
                out << "conv { filters " << l.out_channels << "  kernel " << l.kernel_h << " "
                    << l.kernel_w << "  stride " << l.stride_y << " " << l.stride_x << " }\n";
                break;
            case LayerType::MdLstm:
                out << "mdlstm { }\n";
                break;
            case LayerType::Dropout: {
                std::ostringstream p;
                p.precision(17);
                p << l.dropout_p;
                out << "dropout { p " << p.str() << " }\n";
                break;
            }
        }
    }
    out << "output { predictors " << cfg.predictors << " }\n";
    if (cfg.lambda_override) {
        std::ostringstream lam;
        lam.precision(17);
        lam << "lambda { " << (*cfg.lambda_override)[0] << " " << (*cfg.lambda_override)[1] << " "
            << (*cfg.lambda_override)[2] << " " << (*cfg.lambda_override)[3] << " }\n";
        out << lam.str();
    }
    return out.str();
}

}  // namespace linedet
