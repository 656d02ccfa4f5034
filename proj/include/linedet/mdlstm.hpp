// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "linedet/activations.hpp"
#include "linedet/tensor.hpp"

namespace linedet {

/// One 2D-LSTM scan direction, named by the corner the scan starts from.
enum class ScanOrigin { TopLeft = 0, TopRight = 1, BottomLeft = 2, BottomRight = 3 };

constexpr std::array<ScanOrigin, 4> kScanOrigins = {
    ScanOrigin::TopLeft, ScanOrigin::TopRight, ScanOrigin::BottomLeft, ScanOrigin::BottomRight};

inline const char* scan_origin_name(ScanOrigin o) {
    switch (o) {
        case ScanOrigin::TopLeft: return "top-left";
        case ScanOrigin::TopRight: return "top-right";
        case ScanOrigin::BottomLeft: return "bottom-left";
        case ScanOrigin::BottomRight: return "bottom-right";
    }
    return "?";
}

/// Gate blocks stacked along the row dimension of every parameter matrix,
/// in this fixed order. The cell recurrence at each site (with predecessors
/// taken one step against the scan direction, zero state outside the map):
///   i, f_v, f_h, o = sigmoid(W x + U_v h_v + U_h h_h + b)
///   z              = tanh   (W x + U_v h_v + U_h h_h + b)
///   s = i*z + f_v*s_v + f_h*s_h
///   h = o * tanh(s)
enum GateBlock { kGateInput = 0, kGateForgetV = 1, kGateForgetH = 2, kGateOutput = 3, kGateCand = 4 };
constexpr int kGateCount = 5;

/// Parameters of a single scan direction: input weights W [5H x d], the two
/// recurrent matrices U_v, U_h [5H x H] for the vertical and horizontal
/// predecessor, and the bias [5H].
template <typename T>
struct DirectionalLstmParams {
    int in_channels = 0;
    int hidden = 0;
    std::vector<T> w_in;
    std::vector<T> u_vert;
    std::vector<T> u_horz;
    std::vector<T> bias;

    DirectionalLstmParams() = default;
    DirectionalLstmParams(int d, int h) : in_channels(d), hidden(h) {
        if (d < 1 || h < 1)
            throw std::invalid_argument("DirectionalLstmParams: channels and hidden must be >= 1");
        w_in.assign(static_cast<std::size_t>(kGateCount) * h * d, T(0));
        u_vert.assign(static_cast<std::size_t>(kGateCount) * h * h, T(0));
        u_horz.assign(static_cast<std::size_t>(kGateCount) * h * h, T(0));
        bias.assign(static_cast<std::size_t>(kGateCount) * h, T(0));
    }

    std::int64_t parameter_count() const {
        const std::int64_t d = in_channels, h = hidden;
        return kGateCount * (d * h + 2 * h * h + h);
    }

    template <typename F>
    void visit(F&& f) {
        f(w_in);
        f(u_vert);
        f(u_horz);
        f(bias);
    }
    template <typename F>
    void visit(F&& f) const {
        f(w_in);
        f(u_vert);
        f(u_horz);
        f(bias);
    }
};

/// A full 2D-LSTM layer: four directional parameter sets whose hidden maps
/// are summed element-wise. hidden == in_channels, so the summed output can
/// feed a following convolution with unchanged channel count.
template <typename T>
struct MdLstmParams {
    int channels = 0;
    std::array<DirectionalLstmParams<T>, 4> dirs;

    MdLstmParams() = default;
    explicit MdLstmParams(int d) : channels(d) {
        for (auto& dir : dirs) dir = DirectionalLstmParams<T>(d, d);
    }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& dir : dirs) n += dir.parameter_count();
        return n;
    }

    template <typename F>
    void visit(F&& f) {
        for (auto& dir : dirs) dir.visit(f);
    }
    template <typename F>
    void visit(F&& f) const {
        for (const auto& dir : dirs) dir.visit(f);
    }
};

inline std::int64_t mdlstm_param_count(int d, int hidden) {
    if (d < 1 || hidden < 1)
        throw std::invalid_argument("mdlstm_param_count: d and hidden must be >= 1");
    const std::int64_t dd = d, h = hidden;
    return 4 * kGateCount * (dd * h + 2 * h * h + h);
}

/// How to schedule the per-site recurrence. Raster order and anti-diagonal
/// (wavefront) order compute identical arithmetic per site; sites on one
/// anti-diagonal only read state from the previous one, so the wavefront
/// schedule is bit-identical to raster and may fan out across threads.
struct ExecPolicy {
    bool wavefront = false;
    int threads = 1;
};

/// Gate and state maps of one directional pass, stored site-major:
/// value for unit k at site (r, c) lives at [(r * cols + c) * hidden + k].
template <typename T>
struct DirectionalLstmCache {
    int rows = 0, cols = 0, hidden = 0;
    std::vector<T> gate_i, gate_fv, gate_fh, gate_o, gate_z;
    std::vector<T> cell;
    std::vector<T> hidden_out;

    void init(int r, int c, int h) {
        rows = r;
        cols = c;
        hidden = h;
        const std::size_t n = static_cast<std::size_t>(r) * c * h;
        gate_i.assign(n, T(0));
        gate_fv.assign(n, T(0));
        gate_fh.assign(n, T(0));
        gate_o.assign(n, T(0));
        gate_z.assign(n, T(0));
        cell.assign(n, T(0));
        hidden_out.assign(n, T(0));
    }
};

template <typename T>
struct MdLstmCache {
    int channels = 0, rows = 0, cols = 0;
    std::vector<T> input_site;  // [r][c][d] transposed copy of the layer input
    std::array<DirectionalLstmCache<T>, 4> dirs;
};

namespace detail {

// y += A x, A row-major [rows x cols]
template <typename T>
inline void matvec_add(const T* a, const T* x, T* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const T* row = a + static_cast<std::size_t>(r) * cols;
        T acc = y[r];
        for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

// x += A^T y, A row-major [rows x cols]
template <typename T>
inline void matvec_t_add(const T* a, const T* y, T* x, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const T* row = a + static_cast<std::size_t>(r) * cols;
        const T yr = y[r];
        if (yr == T(0)) continue;
        for (int c = 0; c < cols; ++c) x[c] += row[c] * yr;
    }
}

// A += y x^T
template <typename T>
inline void outer_add(T* a, const T* y, const T* x, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        T* row = a + static_cast<std::size_t>(r) * cols;
        const T yr = y[r];
        if (yr == T(0)) continue;
        for (int c = 0; c < cols; ++c) row[c] += yr * x[c];
    }
}

struct ScanFrame {
    int r0, dr, c0, dc;
};

inline ScanFrame scan_frame(ScanOrigin origin, int rows, int cols) {
    switch (origin) {
        case ScanOrigin::TopLeft: return {0, 1, 0, 1};
        case ScanOrigin::TopRight: return {0, 1, cols - 1, -1};
        case ScanOrigin::BottomLeft: return {rows - 1, -1, 0, 1};
        case ScanOrigin::BottomRight: return {rows - 1, -1, cols - 1, -1};
    }
    return {0, 1, 0, 1};
}

/// Runs fn(rr, cc) over the scan-space grid. Raster order, or anti-diagonal
/// order when policy.wavefront is set; each anti-diagonal may be split
/// across threads because its sites are mutually independent.
template <typename Fn>
void run_scan(int rows, int cols, const ExecPolicy& policy, Fn&& fn) {
    if (!policy.wavefront) {
        for (int rr = 0; rr < rows; ++rr)
            for (int cc = 0; cc < cols; ++cc) fn(rr, cc);
        return;
    }
    for (int d = 0; d <= rows + cols - 2; ++d) {
        const int rr_lo = d >= cols ? d - cols + 1 : 0;
        const int rr_hi = d < rows ? d : rows - 1;
        const int count = rr_hi - rr_lo + 1;
        if (policy.threads <= 1 || count < 2 * policy.threads) {
            for (int rr = rr_lo; rr <= rr_hi; ++rr) fn(rr, d - rr);
            continue;
        }
        const int nthreads = policy.threads;
        std::vector<std::thread> pool;
        pool.reserve(nthreads);
        for (int t = 0; t < nthreads; ++t) {
            const int lo = rr_lo + static_cast<int>(static_cast<std::int64_t>(count) * t / nthreads);
            const int hi = rr_lo + static_cast<int>(static_cast<std::int64_t>(count) * (t + 1) / nthreads);
            pool.emplace_back([&fn, lo, hi, d]() {
                for (int rr = lo; rr < hi; ++rr) fn(rr, d - rr);
            });
        }
        for (auto& th : pool) th.join();
    }
}

/// Core directional forward over a site-major input [r][c][d].
template <typename T>
void direction_forward_site(const std::vector<T>& input_site, int rows, int cols,
                            const DirectionalLstmParams<T>& p, ScanOrigin origin,
                            const ExecPolicy& policy, DirectionalLstmCache<T>& cache) {
    const int d = p.in_channels;
    const int H = p.hidden;
    const int G = kGateCount * H;
    cache.init(rows, cols, H);

    // Input contribution (bias + W x) is recurrence-free; fill it up front.
    std::vector<T> pre(static_cast<std::size_t>(rows) * cols * G);
    for (int s = 0; s < rows * cols; ++s) {
        T* ps = pre.data() + static_cast<std::size_t>(s) * G;
        for (int g = 0; g < G; ++g) ps[g] = p.bias[g];
        matvec_add(p.w_in.data(), input_site.data() + static_cast<std::size_t>(s) * d, ps, G, d);
    }

    const ScanFrame f = scan_frame(origin, rows, cols);
    auto site_body = [&](int rr, int cc) {
        const int r = f.r0 + f.dr * rr;
        const int c = f.c0 + f.dc * cc;
        const int s = r * cols + c;
        const int sv = rr > 0 ? (r - f.dr) * cols + c : -1;
        const int sh = cc > 0 ? r * cols + (c - f.dc) : -1;
        T* ps = pre.data() + static_cast<std::size_t>(s) * G;
        if (sv >= 0)
            matvec_add(p.u_vert.data(), cache.hidden_out.data() + static_cast<std::size_t>(sv) * H,
                       ps, G, H);
        if (sh >= 0)
            matvec_add(p.u_horz.data(), cache.hidden_out.data() + static_cast<std::size_t>(sh) * H,
                       ps, G, H);
        const std::size_t base = static_cast<std::size_t>(s) * H;
        for (int k = 0; k < H; ++k) {
            const T gi = sigmoid(ps[kGateInput * H + k]);
            const T gfv = sigmoid(ps[kGateForgetV * H + k]);
            const T gfh = sigmoid(ps[kGateForgetH * H + k]);
            const T go = sigmoid(ps[kGateOutput * H + k]);
            const T gz = std::tanh(ps[kGateCand * H + k]);
            T s_cell = gi * gz;
            if (sv >= 0) s_cell += gfv * cache.cell[static_cast<std::size_t>(sv) * H + k];
            if (sh >= 0) s_cell += gfh * cache.cell[static_cast<std::size_t>(sh) * H + k];
            cache.gate_i[base + k] = gi;
            cache.gate_fv[base + k] = gfv;
            cache.gate_fh[base + k] = gfh;
            cache.gate_o[base + k] = go;
            cache.gate_z[base + k] = gz;
            cache.cell[base + k] = s_cell;
            cache.hidden_out[base + k] = go * std::tanh(s_cell);
        }
    };
    run_scan(rows, cols, policy, site_body);
}

/// Directional backward; reverse raster scan. Accumulates parameter
/// gradients into `gp` and input gradients into `grad_input_site`.
template <typename T>
void direction_backward_site(const std::vector<T>& input_site, int rows, int cols,
                             const DirectionalLstmParams<T>& p, ScanOrigin origin,
                             const DirectionalLstmCache<T>& cache,
                             const std::vector<T>& grad_hidden_site,
                             DirectionalLstmParams<T>& gp, std::vector<T>& grad_input_site) {
    const int d = p.in_channels;
    const int H = p.hidden;
    const int G = kGateCount * H;
    const std::size_t n = static_cast<std::size_t>(rows) * cols * H;

    std::vector<T> dh(grad_hidden_site);  // gradient w.r.t. each site's hidden output
    std::vector<T> ds(n, T(0));           // gradient w.r.t. each site's cell state
    std::vector<T> dpre(G);

    const ScanFrame f = scan_frame(origin, rows, cols);
    for (int rr = rows - 1; rr >= 0; --rr) {
        for (int cc = cols - 1; cc >= 0; --cc) {
            const int r = f.r0 + f.dr * rr;
            const int c = f.c0 + f.dc * cc;
            const int s = r * cols + c;
            const int sv = rr > 0 ? (r - f.dr) * cols + c : -1;
            const int sh = cc > 0 ? r * cols + (c - f.dc) : -1;
            const std::size_t base = static_cast<std::size_t>(s) * H;
            for (int k = 0; k < H; ++k) {
                const T gi = cache.gate_i[base + k];
                const T gfv = cache.gate_fv[base + k];
                const T gfh = cache.gate_fh[base + k];
                const T go = cache.gate_o[base + k];
                const T gz = cache.gate_z[base + k];
                const T th = std::tanh(cache.cell[base + k]);
                const T dh_k = dh[base + k];
                const T ds_k = ds[base + k] + dh_k * go * (T(1) - th * th);

                dpre[kGateOutput * H + k] = dh_k * th * go * (T(1) - go);
                dpre[kGateInput * H + k] = ds_k * gz * gi * (T(1) - gi);
                dpre[kGateCand * H + k] = ds_k * gi * (T(1) - gz * gz);
                if (sv >= 0) {
                    const T s_prev = cache.cell[static_cast<std::size_t>(sv) * H + k];
                    dpre[kGateForgetV * H + k] = ds_k * s_prev * gfv * (T(1) - gfv);
                    ds[static_cast<std::size_t>(sv) * H + k] += ds_k * gfv;
                } else {
                    dpre[kGateForgetV * H + k] = T(0);
                }
                if (sh >= 0) {
                    const T s_prev = cache.cell[static_cast<std::size_t>(sh) * H + k];
                    dpre[kGateForgetH * H + k] = ds_k * s_prev * gfh * (T(1) - gfh);
                    ds[static_cast<std::size_t>(sh) * H + k] += ds_k * gfh;
                } else {
                    dpre[kGateForgetH * H + k] = T(0);
                }
            }
            for (int g = 0; g < G; ++g) gp.bias[g] += dpre[g];
            outer_add(gp.w_in.data(), dpre.data(),
                      input_site.data() + static_cast<std::size_t>(s) * d, G, d);
            if (sv >= 0) {
                outer_add(gp.u_vert.data(), dpre.data(),
                          cache.hidden_out.data() + static_cast<std::size_t>(sv) * H, G, H);
                matvec_t_add(p.u_vert.data(), dpre.data(),
                             dh.data() + static_cast<std::size_t>(sv) * H, G, H);
            }
            if (sh >= 0) {
                outer_add(gp.u_horz.data(), dpre.data(),
                          cache.hidden_out.data() + static_cast<std::size_t>(sh) * H, G, H);
                matvec_t_add(p.u_horz.data(), dpre.data(),
                             dh.data() + static_cast<std::size_t>(sh) * H, G, H);
            }
            matvec_t_add(p.w_in.data(), dpre.data(),
                         grad_input_site.data() + static_cast<std::size_t>(s) * d, G, d);
        }
    }
}

template <typename T>
std::vector<T> to_site_major(const Tensor<T>& t) {
    std::vector<T> out(t.size());
    const int C = t.channels, R = t.height, W = t.width;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < W; ++x)
                out[(static_cast<std::size_t>(y) * W + x) * C + c] = t.at(c, y, x);
    return out;
}

template <typename T>
Tensor<T> from_site_major(const std::vector<T>& site, int channels, int rows, int cols) {
    Tensor<T> t(channels, rows, cols);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x)
            for (int c = 0; c < channels; ++c)
                t.at(c, y, x) = site[(static_cast<std::size_t>(y) * cols + x) * channels + c];
    return t;
}

}  // namespace detail

/// Single directional pass on a channel-major input, returning the hidden
/// map in channel-major layout plus the cache needed for backward.
template <typename T>
std::pair<Tensor<T>, DirectionalLstmCache<T>> lstm_direction_forward(
    const Tensor<T>& input, const DirectionalLstmParams<T>& params, ScanOrigin origin,
    const ExecPolicy& policy = {}) {
    if (input.channels != params.in_channels)
        throw std::invalid_argument("lstm_direction_forward: input has " +
                                    std::to_string(input.channels) + " channels, params expect " +
                                    std::to_string(params.in_channels));
    const auto site = detail::to_site_major(input);
    DirectionalLstmCache<T> cache;
    detail::direction_forward_site(site, input.height, input.width, params, origin, policy, cache);
    Tensor<T> hidden =
        detail::from_site_major(cache.hidden_out, params.hidden, input.height, input.width);
    return {std::move(hidden), std::move(cache)};
}

/// Full layer forward: four directional passes summed element-wise
/// (fixed order: top-left, top-right, bottom-left, bottom-right).
template <typename T>
Tensor<T> mdlstm_forward(const Tensor<T>& input, const MdLstmParams<T>& layer,
                         MdLstmCache<T>* cache, const ExecPolicy& policy = {}) {
    if (input.channels != layer.channels)
        throw std::invalid_argument("mdlstm_forward: input has " + std::to_string(input.channels) +
                                    " channels, layer expects " + std::to_string(layer.channels));
    const int rows = input.height, cols = input.width, H = layer.channels;
    MdLstmCache<T> local;
    MdLstmCache<T>& cc = cache ? *cache : local;
    cc.channels = H;
    cc.rows = rows;
    cc.cols = cols;
    cc.input_site = detail::to_site_major(input);

    auto run_dir = [&](int di) {
        detail::direction_forward_site(cc.input_site, rows, cols, layer.dirs[di],
                                       kScanOrigins[di], policy, cc.dirs[di]);
    };
    if (policy.threads > 1) {
        std::vector<std::thread> pool;
        for (int di = 0; di < 4; ++di) pool.emplace_back(run_dir, di);
        for (auto& th : pool) th.join();
    } else {
        for (int di = 0; di < 4; ++di) run_dir(di);
    }

    std::vector<T> sum(static_cast<std::size_t>(rows) * cols * H, T(0));
    for (int di = 0; di < 4; ++di) {
        const auto& h = cc.dirs[di].hidden_out;
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += h[i];
    }
    Tensor<T> out = detail::from_site_major(sum, H, rows, cols);
    if (!cache) {
        // no cache requested: free the per-site maps eagerly
        for (auto& d : local.dirs) d = DirectionalLstmCache<T>();
    }
    return out;
}

template <typename T>
struct MdLstmGrads {
    Tensor<T> input;
    MdLstmParams<T> params;
};

template <typename T>
MdLstmGrads<T> mdlstm_backward(const MdLstmParams<T>& layer, const MdLstmCache<T>& cache,
                               const Tensor<T>& grad_out, const ExecPolicy& policy = {}) {
    if (cache.channels != layer.channels || cache.input_site.empty())
        throw std::invalid_argument("mdlstm_backward: cache does not match this layer");
    if (grad_out.channels != layer.channels || grad_out.height != cache.rows ||
        grad_out.width != cache.cols)
        throw std::invalid_argument("mdlstm_backward: grad_out shape " + grad_out.shape_str() +
                                    " does not match cached forward shape " +
                                    std::to_string(layer.channels) + "x" +
                                    std::to_string(cache.rows) + "x" + std::to_string(cache.cols));
    const int rows = cache.rows, cols = cache.cols, H = layer.channels;
    const auto grad_site = detail::to_site_major(grad_out);

    MdLstmGrads<T> g;
    g.params = MdLstmParams<T>(H);
    std::array<std::vector<T>, 4> dx;
    auto run_dir = [&](int di) {
        dx[di].assign(static_cast<std::size_t>(rows) * cols * H, T(0));
        detail::direction_backward_site(cache.input_site, rows, cols, layer.dirs[di],
                                        kScanOrigins[di], cache.dirs[di], grad_site,
                                        g.params.dirs[di], dx[di]);
    };
    if (policy.threads > 1) {
        std::vector<std::thread> pool;
        for (int di = 0; di < 4; ++di) pool.emplace_back(run_dir, di);
        for (auto& th : pool) th.join();
    } else {
        for (int di = 0; di < 4; ++di) run_dir(di);
    }
    // fixed summation order over directions keeps results reproducible
    for (int di = 1; di < 4; ++di)
        for (std::size_t i = 0; i < dx[0].size(); ++i) dx[0][i] += dx[di][i];
    g.input = detail::from_site_major(dx[0], H, rows, cols);
    return g;
}

}  // namespace linedet
