// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "linedet/data.hpp"
#include "linedet/loss.hpp"
#include "linedet/matching.hpp"
#include "linedet/metrics.hpp"
#include "linedet/model.hpp"
#include "linedet/sgd.hpp"

namespace linedet {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 8;
    double alpha_match = 1000.0;
    double alpha_loss = 100.0;
    std::optional<double> dropout_override;  // overrides every dropout layer's p when set
    int epochs = 10;
    std::uint64_t seed = 1;
    int checkpoint_interval = 1;  // epochs between checkpoints; 0 disables periodic saves
    bool deterministic = false;
    double eval_iou_threshold = 0.5;
    ExecPolicy policy;

    void validate() const {
        if (learning_rate < 0) throw std::invalid_argument("train config: learning rate must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
        if (alpha_match <= 0 || alpha_loss <= 0)
            throw std::invalid_argument("train config: alpha values must be positive");
        if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
        if (checkpoint_interval < 0)
            throw std::invalid_argument("train config: checkpoint interval must be >= 0");
        if (dropout_override && (*dropout_override < 0.0 || *dropout_override >= 1.0))
            throw std::invalid_argument("train config: dropout must lie in [0, 1)");
    }
};

template <typename T>
struct TrainState {
    NetworkModel<T> model;
    std::uint64_t step = 0;
    int epoch = 0;
    Rng rng;
    double best_f = -1.0;
    int best_epoch = -1;
    double best_threshold = 0.5;
};

/// Rescales page-normalized targets into the model's coordinate units
/// (pixels over the reference page size). Identity when the page matches
/// the reference size.
inline std::vector<BoxTarget> targets_to_model_units(const std::vector<BoxTarget>& ts, int img_h,
                                                     int img_w, const ArchitectureConfig& cfg) {
    const double sx = static_cast<double>(img_w) / cfg.reference_width;
    const double sy = static_cast<double>(img_h) / cfg.reference_height;
    std::vector<BoxTarget> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back({t.x * sx, t.y * sy, t.w * sx, t.h * sy});
    return out;
}

template <typename T>
NetworkModel<T> apply_dropout_override(NetworkModel<T> model, std::optional<double> p) {
    if (p) {
        for (auto& l : model.layers)
            if (auto* d = std::get_if<DropoutParams>(&l)) d->p = *p;
    }
    return model;
}

struct StepStats {
    double mean_loss = 0.0;
    std::vector<double> losses;  // NaN for skipped images
    int contributed = 0;
    int skipped = 0;
};

namespace detail {

template <typename T>
void add_grads(ModelGrads<T>& acc, ModelGrads<T>& inc) {
    std::vector<std::vector<T>*> a, b;
    acc.visit_param_chunks_mut([&](std::vector<T>& c) { a.push_back(&c); });
    inc.visit_param_chunks_mut([&](std::vector<T>& c) { b.push_back(&c); });
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i]->size(); ++j) (*a[i])[j] += (*b[i])[j];
}

template <typename T>
void scale_grads(ModelGrads<T>& g, T factor) {
    g.visit_param_chunks_mut([&](std::vector<T>& c) {
        for (T& v : c) v *= factor;
    });
}

}  // namespace detail

/// One SGD step over a minibatch: per image forward (training mode), decode,
/// global matching with alpha_match, loss and gradients with alpha_loss,
/// full backward. Per-image gradients are reduced in image order whatever
/// the thread count, then one parameter update with the batch-mean gradient.
/// Images with more targets than predictors are skipped with a warning.
template <typename T>
StepStats train_step(TrainState<T>& state, const std::vector<const PageSample<T>*>& batch,
                     const TrainConfig& cfg, std::ostream* warnings = nullptr) {
    cfg.validate();
    const std::size_t b = batch.size();
    StepStats stats;
    stats.losses.assign(b, std::numeric_limits<double>::quiet_NaN());

    // image RNG streams drawn up front, in order, so threading cannot
    // reorder consumption of the trainer stream
    std::vector<std::uint64_t> image_seeds(b);
    for (std::size_t i = 0; i < b; ++i) image_seeds[i] = state.rng.next_u64();

    std::vector<std::unique_ptr<ModelGrads<T>>> grads(b);
    std::vector<std::string> warn_msgs(b);

    auto work = [&](std::size_t i) {
        const PageSample<T>& sample = *batch[i];
        Rng rng(image_seeds[i]);
        ForwardCaches<T> caches;
        Tensor<T> raw = forward(state.model, sample.image, /*training=*/true, &rng, &caches,
                                cfg.policy);
        const auto preds = decode_outputs(raw, state.model.geometry);
        const auto targets = targets_to_model_units(sample.targets, sample.image.height,
                                                    sample.image.width, state.model.config);
        if (targets.size() > preds.size()) {
            warn_msgs[i] = "warning: image '" + sample.name + "' has " +
                           std::to_string(targets.size()) + " targets but only " +
                           std::to_string(preds.size()) + " predictors; skipped\n";
            return;
        }
        const MatchResult match = match_hungarian(preds, targets, cfg.alpha_match);
        Tensor<T> grad_raw(raw.channels, raw.height, raw.width);
        const double loss =
            loss_and_output_grads(preds, targets, match, cfg.alpha_loss,
                                  state.model.geometry, grad_raw);
        auto g = std::make_unique<ModelGrads<T>>(grads_like(state.model));
        backward(state.model, caches, grad_raw, *g, cfg.policy);
        grads[i] = std::move(g);
        stats.losses[i] = loss;
    };

    const int nthreads = std::max(1, cfg.policy.threads);
    if (nthreads > 1 && b > 1) {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        // static round-robin split keeps the work deterministic per image
        for (int t = 0; t < nthreads; ++t) {
            pool.emplace_back([&, t]() {
                for (std::size_t i = static_cast<std::size_t>(t); i < b;
                     i += static_cast<std::size_t>(nthreads))
                    work(i);
            });
        }
        (void)next;
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t i = 0; i < b; ++i) work(i);
    }

    for (const auto& msg : warn_msgs)
        if (!msg.empty() && warnings) *warnings << msg;

    ModelGrads<T> total = grads_like(state.model);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (!grads[i]) {
            ++stats.skipped;
            continue;
        }
        detail::add_grads(total, *grads[i]);
        loss_sum += stats.losses[i];
        ++stats.contributed;
    }
    if (stats.contributed > 0) {
        detail::scale_grads(total, static_cast<T>(1.0 / stats.contributed));
        std::vector<std::vector<T>*> params, gchunks;
        visit_param_chunks(state.model, [&](std::vector<T>& c) { params.push_back(&c); });
        total.visit_param_chunks_mut([&](std::vector<T>& c) { gchunks.push_back(&c); });
        for (std::size_t i = 0; i < params.size(); ++i)
            sgd_step(std::span<T>(*params[i]), std::span<const T>(*gchunks[i]),
                     static_cast<T>(cfg.learning_rate));
        stats.mean_loss = loss_sum / stats.contributed;
        ++state.step;
    } else {
        stats.mean_loss = std::numeric_limits<double>::quiet_NaN();
    }
    return stats;
}

/// Evaluation-mode predictions for a page, together with its targets in
/// model units. No dropout, no parameter mutation.
template <typename T>
struct PagePredictions {
    std::vector<BoxPrediction> preds;
    std::vector<BoxTarget> targets;
};

template <typename T>
PagePredictions<T> predict_page(const NetworkModel<T>& model, const PageSample<T>& sample,
                                const ExecPolicy& policy = {}) {
    PagePredictions<T> out;
    Tensor<T> raw = forward(model, sample.image, /*training=*/false, nullptr, nullptr, policy);
    out.preds = decode_outputs(raw, model.geometry);
    out.targets = targets_to_model_units(sample.targets, sample.image.height, sample.image.width,
                                         model.config);
    return out;
}

struct ValidationResult {
    double best_threshold = 0.5;
    EvalReport report;
};

/// Sweeps the confidence threshold on a validation split and returns the
/// report at the best IoU-F-measure threshold.
template <typename T>
ValidationResult validate_model(const NetworkModel<T>& model,
                                const std::vector<PageSample<T>>& val_set, double iou_threshold,
                                const ExecPolicy& policy = {}) {
    std::vector<double> thresholds;
    for (int i = 1; i <= 19; ++i) thresholds.push_back(0.05 * i);
    std::vector<IouCounts> totals(thresholds.size());
    for (const auto& sample : val_set) {
        const auto page = predict_page(model, sample, policy);
        std::vector<Box> hyps;
        std::vector<double> confs;
        hyps.reserve(page.preds.size());
        for (const auto& p : page.preds) {
            hyps.push_back({p.x, p.y, p.w, p.h});
            confs.push_back(p.confidence);
        }
        std::vector<Box> refs;
        for (const auto& t : page.targets) refs.push_back({t.x, t.y, t.w, t.h});
        const auto counts = iou_sweep_counts(hyps, confs, refs, iou_threshold, thresholds);
        for (std::size_t i = 0; i < totals.size(); ++i) totals[i] += counts[i];
    }
    ValidationResult best;
    double best_f = -1.0;
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        EvalReport r = iou_report(totals[i], iou_threshold, thresholds[i]);
        if (r.f_measure > best_f) {
            best_f = r.f_measure;
            best.best_threshold = thresholds[i];
            best.report = r;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Checkpoints: training state wrapped around the model file format.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kCkptMagic[8] = {'L', 'D', 'N', 'E', 'T', 'C', 'K', 'P'};
}

template <typename T>
void save_checkpoint(const std::string& path, const TrainState<T>& state) {
    detail::ByteWriter w;
    w.raw(detail::kCkptMagic, 8);
    w.u32(1);
    w.u64(state.step);
    w.u32(static_cast<std::uint32_t>(state.epoch));
    w.u64(state.rng.seed());
    w.u64(state.rng.counter());
    w.f64(state.best_f);
    w.u32(static_cast<std::uint32_t>(state.best_epoch + 1));  // shifted so -1 stores as 0
    w.f64(state.best_threshold);
    const auto model_bytes = serialize(state.model);
    w.u64(model_bytes.size());
    w.raw(model_bytes.data(), model_bytes.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

/// Precision (4 or 8 bytes per real) of the model inside a checkpoint.
inline int checkpoint_precision(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r{bytes.data(), bytes.size()};
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: bad magic at byte 0");
    r.u32("version");
    r.u64("step");
    r.u32("epoch");
    r.u64("rng seed");
    r.u64("rng counter");
    r.f64("best f");
    r.u32("best epoch");
    r.f64("best threshold");
    const std::uint64_t len = r.u64("model length");
    r.need(len, "model block");
    std::vector<std::uint8_t> model_bytes(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
    return serialized_precision(model_bytes);
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    detail::ByteReader r{bytes.data(), bytes.size()};
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw std::runtime_error(path + ": not a checkpoint file (bad magic)");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    TrainState<T> state;
    state.step = r.u64("step");
    state.epoch = static_cast<int>(r.u32("epoch"));
    const std::uint64_t seed = r.u64("rng seed");
    const std::uint64_t counter = r.u64("rng counter");
    state.rng = Rng::from_state(seed, counter);
    state.best_f = r.f64("best f");
    state.best_epoch = static_cast<int>(r.u32("best epoch")) - 1;
    state.best_threshold = r.f64("best threshold");
    const std::uint64_t len = r.u64("model length");
    r.need(len, "model block");
    std::vector<std::uint8_t> model_bytes(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
    state.model = deserialize<T>(model_bytes);
    return state;
}

/// Epoch loop with seeded shuffling. Appends one line per epoch to
/// metrics_log: epoch, mean train loss, and validation P/R/F at the swept
/// confidence threshold. Keeps the best-F checkpoint when out_dir is given.
/// Resuming from a loaded state continues after state.epoch.
template <typename T>
TrainState<T> train(TrainState<T> state, const std::vector<PageSample<T>>& train_set,
                    const std::vector<PageSample<T>>& val_set, const TrainConfig& cfg,
                    const std::string& out_dir, std::ostream& metrics_log,
                    std::ostream* console = nullptr) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    state.model = apply_dropout_override(std::move(state.model), cfg.dropout_override);

    char line[256];
    auto log_epoch = [&](int epoch, double loss, const ValidationResult& val) {
        std::snprintf(line, sizeof(line),
                      "epoch %d loss %.6f conf_thr %.2f precision %.6f recall %.6f f_measure %.6f\n",
                      epoch, loss, val.best_threshold, val.report.precision, val.report.recall,
                      val.report.f_measure);
        metrics_log << line;
        metrics_log.flush();
        if (console) *console << line;
    };
    auto maybe_save = [&](const char* name, const TrainState<T>& s) {
        if (out_dir.empty()) return;
        std::filesystem::create_directories(out_dir);
        save_checkpoint(out_dir + "/" + name, s);
    };

    if (cfg.epochs == 0 || state.epoch >= cfg.epochs) {
        const auto val = validate_model(state.model, val_set, cfg.eval_iou_threshold, cfg.policy);
        log_epoch(state.epoch, std::numeric_limits<double>::quiet_NaN(), val);
        maybe_save("last.ckpt", state);
        return state;
    }

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates with the trainer stream
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(
                state.rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        double loss_sum = 0.0;
        long loss_count = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<const PageSample<T>*> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
                batch.push_back(&train_set[order[i]]);
            const StepStats stats = train_step(state, batch, cfg, console);
            for (double l : stats.losses) {
                if (!std::isnan(l)) {
                    loss_sum += l;
                    ++loss_count;
                }
            }
        }
        state.epoch = epoch;
        const double epoch_loss =
            loss_count > 0 ? loss_sum / loss_count : std::numeric_limits<double>::quiet_NaN();
        const auto val = validate_model(state.model, val_set, cfg.eval_iou_threshold, cfg.policy);
        log_epoch(epoch, epoch_loss, val);
        if (val.report.f_measure > state.best_f) {
            state.best_f = val.report.f_measure;
            state.best_epoch = epoch;
            state.best_threshold = val.best_threshold;
            maybe_save("best.ckpt", state);
        }
        if (cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0)
            maybe_save("last.ckpt", state);
    }
    maybe_save("last.ckpt", state);
    return state;
}

// ---------------------------------------------------------------------------
// Full-network gradient check with frozen matching.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    double loss = 0.0;
    int coordinates = 0;
};

/// Central-difference check of the full backward pass. The assignment is
/// computed once and held fixed while differencing (it is piecewise
/// constant in the parameters). 64-bit only; dropout is inactive because
/// the forward runs in evaluation mode.
inline GradCheckReport frozen_matching_gradcheck(NetworkModel<double>& model,
                                                 const Tensor<double>& image,
                                                 const std::vector<BoxTarget>& targets,
                                                 double alpha_match, double alpha_loss, Rng& rng,
                                                 int min_coordinates = 200, double eps = 1e-5) {
    ForwardCaches<double> caches;
    Tensor<double> raw = forward(model, image, false, nullptr, &caches);
    auto preds = decode_outputs(raw, model.geometry);
    if (targets.size() > preds.size())
        throw std::invalid_argument("gradcheck: more targets than predictors");
    const MatchResult match = match_hungarian(preds, targets, alpha_match);

    Tensor<double> grad_raw(raw.channels, raw.height, raw.width);
    GradCheckReport report;
    report.loss = loss_and_output_grads(preds, targets, match, alpha_loss, model.geometry, grad_raw);
    ModelGrads<double> grads = grads_like(model);
    backward(model, caches, grad_raw, grads);

    std::vector<std::vector<double>*> pchunks, gchunks;
    visit_param_chunks(model, [&](std::vector<double>& c) { pchunks.push_back(&c); });
    grads.visit_param_chunks_mut([&](std::vector<double>& c) { gchunks.push_back(&c); });

    auto loss_at = [&]() {
        Tensor<double> r = forward(model, image, false, nullptr, nullptr);
        return detection_loss(decode_outputs(r, model.geometry), targets, match, alpha_loss);
    };

    const int per_chunk =
        std::max(2, static_cast<int>((min_coordinates + pchunks.size() - 1) / pchunks.size()));
    for (std::size_t ci = 0; ci < pchunks.size(); ++ci) {
        auto& chunk = *pchunks[ci];
        const auto& gchunk = *gchunks[ci];
        const int n = std::min<int>(per_chunk, static_cast<int>(chunk.size()));
        for (int s = 0; s < n; ++s) {
            const auto idx = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(chunk.size()) - 1));
            const double saved = chunk[idx];
            chunk[idx] = saved + eps;
            const double lp = loss_at();
            chunk[idx] = saved - eps;
            const double lm = loss_at();
            chunk[idx] = saved;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = gchunk[idx];
            // floor avoids amplifying noise on negligible gradients
            const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            const double err = std::abs(analytic - numeric) / scale;
            report.max_rel_error = std::max(report.max_rel_error, err);
            ++report.coordinates;
        }
    }
    return report;
}

}  // namespace linedet
