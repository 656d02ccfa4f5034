// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "linedet/arch.hpp"
#include "linedet/conv.hpp"
#include "linedet/dropout.hpp"
#include "linedet/mdlstm.hpp"
#include "linedet/rng.hpp"
#include "linedet/tensor.hpp"

namespace linedet {

/// Maps raw sigmoid outputs to normalized page coordinates:
///   (x, y, w, h) = lambda ⊙ sigmoid(a) + ((i-1) δx, (j-1) δy, 0, 0)
/// where (i, j) is the 1-based (column, row) of the output site. delta is
/// the per-cell stride of the last feature map and lambda the coordinate
/// scale, both in units of the reference input size.
struct PredictorGeometry {
    double delta_x = 0.0;
    double delta_y = 0.0;
    std::array<double, 4> lambda{0.0, 0.0, 1.0, 1.0};
};

inline PredictorGeometry derive_geometry(const ArchitectureConfig& cfg) {
    cfg.validate();
    const auto [sy, sx] = cfg.stride_product();
    PredictorGeometry g;
    g.delta_x = static_cast<double>(sx) / cfg.reference_width;
    g.delta_y = static_cast<double>(sy) / cfg.reference_height;
    g.lambda = cfg.lambda_override.value_or(
        std::array<double, 4>{2.0 * g.delta_x, 2.0 * g.delta_y, 1.0, 1.0});
    return g;
}

/// One decoded box hypothesis. cell_x/cell_y are the 0-based column/row of
/// the source site on the last feature map, k the predictor index at that
/// site. Coordinates are the top-left corner plus size, normalized by the
/// reference page size.
struct BoxPrediction {
    double x = 0, y = 0, w = 0, h = 0;
    double confidence = 0;
    int cell_x = 0, cell_y = 0, k = 0;
};

struct DropoutParams {
    double p = 0.0;
};

template <typename T>
using LayerParams = std::variant<ConvParams<T>, MdLstmParams<T>, DropoutParams>;

/// The assembled network: parameters for every configured layer plus the
/// 1x1 output head. The parameter count is a pure function of the config
/// and never depends on the size of the input image.
template <typename T>
struct NetworkModel {
    static constexpr std::uint32_t kFormatVersion = 1;

    ArchitectureConfig config;
    std::vector<LayerParams<T>> layers;
    ConvParams<T> head;
    PredictorGeometry geometry;

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        visit_param_chunks(*this, [&](const std::vector<T>& c) { n += static_cast<std::int64_t>(c.size()); });
        return n;
    }
};

/// Calls f on every parameter chunk in declaration order (the order used by
/// the flat SGD view and by the model file format).
template <typename T, typename F>
void visit_param_chunks(NetworkModel<T>& m, F&& f) {
    for (auto& l : m.layers) {
        if (auto* conv = std::get_if<ConvParams<T>>(&l)) conv->visit(f);
        else if (auto* lstm = std::get_if<MdLstmParams<T>>(&l)) lstm->visit(f);
    }
    m.head.visit(f);
}

template <typename T, typename F>
void visit_param_chunks(const NetworkModel<T>& m, F&& f) {
    for (const auto& l : m.layers) {
        if (const auto* conv = std::get_if<ConvParams<T>>(&l)) conv->visit(f);
        else if (const auto* lstm = std::get_if<MdLstmParams<T>>(&l)) lstm->visit(f);
    }
    m.head.visit(f);
}

inline std::int64_t config_parameter_count(const ArchitectureConfig& cfg) {
    std::int64_t n = 0;
    int c = cfg.input_channels;
    for (const auto& l : cfg.layers) {
        if (l.type == LayerType::Conv) {
            n += static_cast<std::int64_t>(l.out_channels) * c * l.kernel_h * l.kernel_w +
                 l.out_channels;
            c = l.out_channels;
        } else if (l.type == LayerType::MdLstm) {
            n += mdlstm_param_count(c, c);
        }
    }
    n += static_cast<std::int64_t>(cfg.head_out_channels()) * c + cfg.head_out_channels();
    return n;
}

namespace detail {

template <typename T>
void init_uniform(std::vector<T>& v, Rng& rng, double scale) {
    for (T& x : v) x = static_cast<T>(rng.uniform(-scale, scale));
}

}  // namespace detail

/// Builds a model from a config. Weights are drawn uniformly from
/// [-init_scale, init_scale]; biases start at zero except the two LSTM
/// forget-gate blocks, which start at +1.
template <typename T>
NetworkModel<T> build_model(const ArchitectureConfig& cfg, Rng& rng, double init_scale = 0.08) {
    cfg.validate();
    NetworkModel<T> m;
    m.config = cfg;
    m.geometry = derive_geometry(cfg);

    int c = cfg.input_channels;
    for (const auto& spec : cfg.layers) {
        switch (spec.type) {
            case LayerType::Conv: {
                ConvParams<T> p(spec.out_channels, c, spec.kernel_h, spec.kernel_w, spec.stride_y,
                                spec.stride_x);
                detail::init_uniform(p.weights, rng, init_scale);
                c = spec.out_channels;
                m.layers.emplace_back(std::move(p));
                break;
            }
            case LayerType::MdLstm: {
                MdLstmParams<T> p(c);
                for (auto& dir : p.dirs) {
                    detail::init_uniform(dir.w_in, rng, init_scale);
                    detail::init_uniform(dir.u_vert, rng, init_scale);
                    detail::init_uniform(dir.u_horz, rng, init_scale);
                    for (int g = 0; g < kGateCount; ++g) {
                        const bool forget = g == kGateForgetV || g == kGateForgetH;
                        for (int k = 0; k < dir.hidden; ++k)
                            dir.bias[static_cast<std::size_t>(g) * dir.hidden + k] =
                                forget ? T(1) : T(0);
                    }
                }
                m.layers.emplace_back(std::move(p));
                break;
            }
            case LayerType::Dropout:
                m.layers.emplace_back(DropoutParams{spec.dropout_p});
                break;
        }
    }
    m.head = ConvParams<T>(cfg.head_out_channels(), c, 1, 1, 1, 1);
    detail::init_uniform(m.head.weights, rng, init_scale);
    return m;
}

/// Per-layer activations retained by a forward pass for backpropagation.
template <typename T>
struct LayerCache {
    Tensor<T> conv_input;
    MdLstmCache<T> lstm;
    Tensor<T> dropout_mask;
};

template <typename T>
struct ForwardCaches {
    std::vector<LayerCache<T>> layers;
    Tensor<T> head_input;
};

/// Runs the network on one image. Dropout fires only in training mode, in
/// which case an Rng must be supplied. Pass `caches` to keep what backward
/// needs; inference can leave it null.
template <typename T>
Tensor<T> forward(const NetworkModel<T>& m, const Tensor<T>& image, bool training, Rng* rng,
                  ForwardCaches<T>* caches, const ExecPolicy& policy = {}) {
    if (image.channels != m.config.input_channels)
        throw std::invalid_argument("forward: image has " + std::to_string(image.channels) +
                                    " channels, model expects " +
                                    std::to_string(m.config.input_channels));
    m.config.map_dims(image.height, image.width);  // throws if too small
    if (caches) {
        caches->layers.assign(m.layers.size(), LayerCache<T>{});
    }

    Tensor<T> x = image;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto& layer = m.layers[li];
        if (const auto* conv = std::get_if<ConvParams<T>>(&layer)) {
            if (caches) caches->layers[li].conv_input = x;
            x = conv2d_forward(x, *conv);
        } else if (const auto* lstm = std::get_if<MdLstmParams<T>>(&layer)) {
            x = mdlstm_forward(x, *lstm, caches ? &caches->layers[li].lstm : nullptr, policy);
        } else {
            const auto& drop = std::get<DropoutParams>(layer);
            if (training && drop.p > 0.0) {
                if (!rng) throw std::logic_error("forward: training dropout requires an Rng");
                auto [out, mask] = dropout_forward(x, drop.p, *rng, true);
                x = std::move(out);
                if (caches) caches->layers[li].dropout_mask = std::move(mask);
            } else if (caches) {
                Tensor<T> ones(x.channels, x.height, x.width);
                ones.fill(T(1));
                caches->layers[li].dropout_mask = std::move(ones);
            }
        }
    }
    if (caches) caches->head_input = x;
    return conv2d_forward(x, m.head);
}

/// Parameter gradients produced by one backward pass, shaped like the model.
template <typename T>
struct ModelGrads {
    std::vector<LayerParams<T>> layers;
    ConvParams<T> head;
    Tensor<T> input;  // gradient w.r.t. the image

    template <typename F>
    void visit_param_chunks_mut(F&& f) {
        for (auto& l : layers) {
            if (auto* conv = std::get_if<ConvParams<T>>(&l)) conv->visit(f);
            else if (auto* lstm = std::get_if<MdLstmParams<T>>(&l)) lstm->visit(f);
        }
        head.visit(f);
    }
};

template <typename T>
ModelGrads<T> grads_like(const NetworkModel<T>& m) {
    ModelGrads<T> g;
    for (const auto& l : m.layers) {
        if (const auto* conv = std::get_if<ConvParams<T>>(&l)) {
            g.layers.emplace_back(ConvParams<T>(conv->out_channels, conv->in_channels,
                                                conv->kernel_h, conv->kernel_w, conv->stride_y,
                                                conv->stride_x));
        } else if (const auto* lstm = std::get_if<MdLstmParams<T>>(&l)) {
            g.layers.emplace_back(MdLstmParams<T>(lstm->channels));
        } else {
            g.layers.emplace_back(std::get<DropoutParams>(l));
        }
    }
    g.head = ConvParams<T>(m.head.out_channels, m.head.in_channels, 1, 1, 1, 1);
    return g;
}

/// Backpropagates grad_raw (gradient w.r.t. the head pre-activations)
/// through the whole stack, accumulating into `grads`.
template <typename T>
void backward(const NetworkModel<T>& m, const ForwardCaches<T>& caches, const Tensor<T>& grad_raw,
              ModelGrads<T>& grads, const ExecPolicy& policy = {}) {
    if (caches.layers.size() != m.layers.size())
        throw std::invalid_argument("backward: cache does not match this model");

    ConvGrads<T> hg = conv2d_backward(caches.head_input, m.head, grad_raw);
    for (std::size_t i = 0; i < hg.params.weights.size(); ++i)
        grads.head.weights[i] += hg.params.weights[i];
    for (std::size_t i = 0; i < hg.params.bias.size(); ++i)
        grads.head.bias[i] += hg.params.bias[i];
    Tensor<T> g = std::move(hg.input);

    for (std::size_t ri = m.layers.size(); ri-- > 0;) {
        const auto& layer = m.layers[ri];
        if (const auto* conv = std::get_if<ConvParams<T>>(&layer)) {
            ConvGrads<T> cg = conv2d_backward(caches.layers[ri].conv_input, *conv, g);
            auto& acc = std::get<ConvParams<T>>(grads.layers[ri]);
            for (std::size_t i = 0; i < cg.params.weights.size(); ++i)
                acc.weights[i] += cg.params.weights[i];
            for (std::size_t i = 0; i < cg.params.bias.size(); ++i)
                acc.bias[i] += cg.params.bias[i];
            g = std::move(cg.input);
        } else if (const auto* lstm = std::get_if<MdLstmParams<T>>(&layer)) {
            MdLstmGrads<T> lg = mdlstm_backward(*lstm, caches.layers[ri].lstm, g, policy);
            auto& acc = std::get<MdLstmParams<T>>(grads.layers[ri]);
            for (int di = 0; di < 4; ++di) {
                auto& ad = acc.dirs[di];
                const auto& sd = lg.params.dirs[di];
                for (std::size_t i = 0; i < ad.w_in.size(); ++i) ad.w_in[i] += sd.w_in[i];
                for (std::size_t i = 0; i < ad.u_vert.size(); ++i) ad.u_vert[i] += sd.u_vert[i];
                for (std::size_t i = 0; i < ad.u_horz.size(); ++i) ad.u_horz[i] += sd.u_horz[i];
                for (std::size_t i = 0; i < ad.bias.size(); ++i) ad.bias[i] += sd.bias[i];
            }
            g = std::move(lg.input);
        } else {
            g = dropout_backward(g, caches.layers[ri].dropout_mask);
        }
    }
    grads.input = std::move(g);
}

/// Decodes the raw head output into box hypotheses. Channel layout per
/// predictor k: [x, y, w, h, confidence] at channels 5k..5k+4. Prediction
/// order: row-major over sites, then k.
template <typename T>
std::vector<BoxPrediction> decode_outputs(const Tensor<T>& raw, const PredictorGeometry& geom) {
    if (raw.channels % 5 != 0)
        throw std::invalid_argument("decode_outputs: raw channel count " +
                                    std::to_string(raw.channels) + " is not a multiple of 5");
    const int K = raw.channels / 5;
    std::vector<BoxPrediction> out;
    out.reserve(static_cast<std::size_t>(raw.height) * raw.width * K);
    for (int j = 0; j < raw.height; ++j) {
        for (int i = 0; i < raw.width; ++i) {
            for (int k = 0; k < K; ++k) {
                const int base = 5 * k;
                BoxPrediction b;
                b.x = geom.lambda[0] * sigmoid(static_cast<double>(raw.at(base + 0, j, i))) +
                      i * geom.delta_x;
                b.y = geom.lambda[1] * sigmoid(static_cast<double>(raw.at(base + 1, j, i))) +
                      j * geom.delta_y;
                b.w = geom.lambda[2] * sigmoid(static_cast<double>(raw.at(base + 2, j, i)));
                b.h = geom.lambda[3] * sigmoid(static_cast<double>(raw.at(base + 3, j, i)));
                b.confidence = sigmoid(static_cast<double>(raw.at(base + 4, j, i)));
                b.cell_x = i;
                b.cell_y = j;
                b.k = k;
                out.push_back(b);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model file format: magic, version, precision byte, config text, then the
// raw parameter chunks in declaration order (little-endian).
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kModelMagic[8] = {'L', 'D', 'N', 'E', 'T', 'M', 'D', 'L'};

struct ByteWriter {
    std::vector<std::uint8_t> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        u64(bits);
    }
    template <typename T>
    void reals(const std::vector<T>& v) {
        if constexpr (std::endian::native == std::endian::little) {
            raw(v.data(), v.size() * sizeof(T));
        } else {
            for (T x : v) {
                if constexpr (sizeof(T) == 4) {
                    std::uint32_t bits;
                    std::memcpy(&bits, &x, 4);
                    u32(bits);
                } else {
                    std::uint64_t bits;
                    std::memcpy(&bits, &x, 8);
                    u64(bits);
                }
            }
        }
    }
};

struct ByteReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n, const std::string& what) {
        if (pos + n > size)
            throw std::runtime_error("model stream truncated at byte " + std::to_string(pos) +
                                     " while reading " + what);
    }
    void raw(void* p, std::size_t n, const std::string& what) {
        need(n, what);
        std::memcpy(p, data + pos, n);
        pos += n;
    }
    std::uint8_t u8(const std::string& what) {
        need(1, what);
        return data[pos++];
    }
    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const std::string& what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const std::string& what) {
        std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    template <typename T>
    void reals(std::vector<T>& v, const std::string& what) {
        need(v.size() * sizeof(T), what);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(v.data(), data + pos, v.size() * sizeof(T));
            pos += v.size() * sizeof(T);
        } else {
            for (T& x : v) {
                if constexpr (sizeof(T) == 4) {
                    std::uint32_t bits = u32(what);
                    std::memcpy(&x, &bits, 4);
                } else {
                    std::uint64_t bits = u64(what);
                    std::memcpy(&x, &bits, 8);
                }
            }
        }
    }
};

inline std::string layer_display_name(const ArchitectureConfig& cfg, std::size_t index) {
    int conv_n = 0, lstm_n = 0, drop_n = 0;
    for (std::size_t i = 0; i <= index && i < cfg.layers.size(); ++i) {
        switch (cfg.layers[i].type) {
            case LayerType::Conv: ++conv_n; break;
            case LayerType::MdLstm: ++lstm_n; break;
            case LayerType::Dropout: ++drop_n; break;
        }
    }
    switch (cfg.layers[index].type) {
        case LayerType::Conv: return "C" + std::to_string(conv_n);
        case LayerType::MdLstm: return "LSTM" + std::to_string(lstm_n);
        case LayerType::Dropout: return "Drop" + std::to_string(drop_n);
    }
    return "?";
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize(const NetworkModel<T>& m) {
    detail::ByteWriter w;
    w.raw(detail::kModelMagic, 8);
    w.u32(NetworkModel<T>::kFormatVersion);
    w.u8(static_cast<std::uint8_t>(sizeof(T)));
    const std::string cfg = format_arch_config(m.config);
    w.u64(cfg.size());
    w.raw(cfg.data(), cfg.size());
    visit_param_chunks(m, [&](const std::vector<T>& chunk) { w.reals(chunk); });
    return w.bytes;
}

/// Reads the precision byte of a serialized model: 4 or 8 (bytes per real).
inline int serialized_precision(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r{bytes.data(), bytes.size()};
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, detail::kModelMagic, 8) != 0)
        throw std::runtime_error("not a model file: bad magic at byte 0");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw std::runtime_error("unsupported model format version " + std::to_string(version) +
                                 " at byte 8");
    const int prec = r.u8("precision");
    if (prec != 4 && prec != 8)
        throw std::runtime_error("bad precision byte " + std::to_string(prec) + " at byte 12");
    return prec;
}

template <typename T>
NetworkModel<T> deserialize(const std::vector<std::uint8_t>& bytes) {
    const int prec = serialized_precision(bytes);
    if (prec != static_cast<int>(sizeof(T)))
        throw std::runtime_error("model stored with " + std::to_string(prec * 8) +
                                 "-bit reals, requested " + std::to_string(sizeof(T) * 8) + "-bit");
    detail::ByteReader r{bytes.data(), bytes.size()};
    r.pos = 8 + 4 + 1;
    const std::uint64_t cfg_len = r.u64("config length");
    std::string cfg_text(cfg_len, '\0');
    r.raw(cfg_text.data(), cfg_len, "config text");
    const ArchitectureConfig cfg = parse_arch_config(cfg_text);

    Rng dummy(0);
    NetworkModel<T> m = build_model<T>(cfg, dummy, 0.0);
    std::size_t li = 0;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto read_all = [&](auto& params) {
            params.visit([&](std::vector<T>& chunk) {
                r.reals(chunk, "parameters of layer " + std::to_string(i + 1) + " (" +
                                   detail::layer_display_name(cfg, i) + ")");
            });
        };
        if (auto* conv = std::get_if<ConvParams<T>>(&m.layers[i])) read_all(*conv);
        else if (auto* lstm = std::get_if<MdLstmParams<T>>(&m.layers[i])) read_all(*lstm);
        ++li;
    }
    m.head.visit([&](std::vector<T>& chunk) { r.reals(chunk, "parameters of the output head"); });
    if (r.pos != r.size)
        throw std::runtime_error("model stream has " + std::to_string(r.size - r.pos) +
                                 " trailing bytes at byte " + std::to_string(r.pos));
    return m;
}

template <typename T>
void save_model(const std::string& path, const NetworkModel<T>& m) {
    const auto bytes = serialize(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

template <typename T>
NetworkModel<T> load_model(const std::string& path) {
    return deserialize<T>(read_file_bytes(path));
}

}  // namespace linedet
