// SPDX-License-Identifier: Apache-2.0
//
// linedet — train, evaluate and run the text-line detector.
//
// Subcommands:
//   synth      generate a synthetic page dataset
//   train      train a model on a dataset directory
//   eval       score a model against ground truth (iou or deteval metric)
//   detect     run one image, emit an SVG overlay and a box list
//   gradcheck  finite-difference check of the full backward pass
//   inspect    per-layer table: filter, stride, map size, parameter count

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "linedet/data.hpp"
#include "linedet/metrics.hpp"
#include "linedet/model.hpp"
#include "linedet/svg.hpp"
#include "linedet/trainer.hpp"

namespace {

using namespace linedet;

int env_threads() {
    const char* v = std::getenv("LINEDET_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n >= 1 ? n : 1;
}

struct CommonOpts {
    int precision = 32;
    bool deterministic = false;
    bool wavefront = false;
    int width = 0;  // width-normalize inputs to this many pixels; 0 = off

    ExecPolicy policy() const {
        ExecPolicy p;
        p.wavefront = wavefront;
        p.threads = env_threads();
        return p;
    }
};

template <typename T>
std::vector<PageSample<T>> load_pages(const std::string& dir, int width) {
    auto pages = load_dataset<T>(dir, &std::cerr);
    if (width > 0)
        for (auto& p : pages) p.image = width_normalize(p.image, width);
    return pages;
}

/// Accepts either a plain model file or a checkpoint.
template <typename T>
NetworkModel<T> load_any_model(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), "LDNETCKP", 8) == 0)
        return load_checkpoint<T>(path).model;
    return deserialize<T>(bytes);
}

int stored_precision(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), "LDNETCKP", 8) == 0)
        return checkpoint_precision(bytes);
    return serialized_precision(bytes);
}

// ---------------------------------------------------------------------- synth

int run_synth(const std::string& spec_path, const std::string& out_dir, int count,
              std::uint64_t seed) {
    SynthSpec spec = spec_path.empty() ? SynthSpec{} : load_synth_spec(spec_path);
    std::filesystem::create_directories(out_dir);
    Rng master(seed);
    for (int i = 0; i < count; ++i) {
        Rng page_rng = master.fork(static_cast<std::uint64_t>(i));
        const auto page = generate_page<float>(spec, page_rng);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "page_%06d", i);
        write_sample(out_dir, stem, page);
    }
    std::cout << "wrote " << count << " pages to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------- train

template <typename T>
int run_train(const std::string& arch_path, const std::string& train_dir,
              const std::string& val_dir, const std::string& out_dir, const TrainConfig& cfg,
              double init_scale, const std::string& resume, const CommonOpts& common) {
    const auto train_set = load_pages<T>(train_dir, common.width);
    const auto val_set = load_pages<T>(val_dir, common.width);

    TrainState<T> state;
    if (!resume.empty()) {
        state = load_checkpoint<T>(resume);
        std::cout << "resumed from " << resume << " at epoch " << state.epoch << "\n";
    } else {
        const auto cfg_arch = load_arch_config(arch_path);
        state.rng = Rng(cfg.seed);
        state.model = build_model<T>(cfg_arch, state.rng, init_scale);
    }

    std::filesystem::create_directories(out_dir);
    std::ofstream metrics_log(out_dir + "/metrics.log", std::ios::app);
    if (!metrics_log) throw std::runtime_error("cannot open " + out_dir + "/metrics.log");

    state = train(std::move(state), train_set, val_set, cfg, out_dir, metrics_log, &std::cout);

    save_model(out_dir + "/last.model", state.model);
    if (state.best_epoch >= 0) {
        const auto best = load_checkpoint<T>(out_dir + "/best.ckpt");
        save_model(out_dir + "/best.model", best.model);
        std::cout << "best epoch " << best.best_epoch << " f_measure " << best.best_f
                  << " conf_thr " << best.best_threshold << "\n";
    }
    return 0;
}

// ----------------------------------------------------------------------- eval

template <typename T>
int run_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& metric, const std::vector<double>& iou_thresholds,
             double conf_threshold, double nms_iou, const std::string& report_path,
             const CommonOpts& common) {
    const auto model = load_any_model<T>(model_path);
    const auto pages = load_pages<T>(data_dir, common.width);

    std::vector<IouCounts> iou_totals(iou_thresholds.size());
    DetevalCounts det_totals;
    for (const auto& sample : pages) {
        auto page = predict_page(model, sample, common.policy());
        if (nms_iou > 0.0) page.preds = nms(page.preds, nms_iou);
        std::vector<Box> hyps;
        std::vector<double> confs;
        for (const auto& p : page.preds) {
            hyps.push_back({p.x, p.y, p.w, p.h});
            confs.push_back(p.confidence);
        }
        std::vector<Box> refs;
        for (const auto& t : page.targets) refs.push_back({t.x, t.y, t.w, t.h});
        if (metric == "iou") {
            for (std::size_t i = 0; i < iou_thresholds.size(); ++i)
                iou_totals[i] +=
                    iou_match_counts(hyps, confs, refs, iou_thresholds[i], conf_threshold);
        } else {
            std::vector<Box> kept;
            for (std::size_t i = 0; i < hyps.size(); ++i)
                if (confs[i] >= conf_threshold) kept.push_back(hyps[i]);
            det_totals += deteval_match_counts(kept, refs);
        }
    }

    std::vector<EvalReport> reports;
    if (metric == "iou") {
        for (std::size_t i = 0; i < iou_thresholds.size(); ++i)
            reports.push_back(iou_report(iou_totals[i], iou_thresholds[i], conf_threshold));
    } else {
        reports.push_back(deteval_report(det_totals, 0.8, 0.4, 0.8));
        if (det_totals.excluded_degenerate > 0)
            std::cerr << "warning: excluded " << det_totals.excluded_degenerate
                      << " zero-area boxes\n";
    }

    char line[256];
    for (const auto& r : reports) {
        if (r.metric == "iou")
            std::snprintf(line, sizeof(line),
                          "iou_thr %.2f  precision %.4f  recall %.4f  f_measure %.4f\n",
                          r.thresholds[0].second, r.precision, r.recall, r.f_measure);
        else
            std::snprintf(line, sizeof(line),
                          "deteval  precision %.4f  recall %.4f  f_measure %.4f\n", r.precision,
                          r.recall, r.f_measure);
        std::cout << line;
    }
    if (!report_path.empty()) {
        std::ofstream rf(report_path);
        if (!rf) throw std::runtime_error("cannot open report file '" + report_path + "'");
        for (const auto& r : reports) {
            write_report_text(rf, r);
            rf << "\n";
        }
    }
    return 0;
}

// --------------------------------------------------------------------- detect

template <typename T>
int run_detect(const std::string& model_path, const std::string& image_path,
               const std::string& out_svg, double conf_threshold, double nms_iou,
               const CommonOpts& common) {
    const auto model = load_any_model<T>(model_path);
    Tensor<T> image = load_pgm<T>(image_path);
    if (common.width > 0) image = width_normalize(image, common.width);

    Tensor<T> raw = forward(model, image, false, nullptr, nullptr, common.policy());
    auto preds = decode_outputs(raw, model.geometry);
    if (nms_iou > 0.0) preds = nms(preds, nms_iou);

    const int rw = model.config.reference_width, rh = model.config.reference_height;
    int shown = 0;
    char line[160];
    for (const auto& p : preds) {
        if (p.confidence < conf_threshold) continue;
        std::snprintf(line, sizeof(line), "box %.1f %.1f %.1f %.1f conf %.4f\n", p.x * rw,
                      p.y * rh, p.w * rw, p.h * rh, p.confidence);
        std::cout << line;
        ++shown;
    }
    std::cout << shown << " boxes at conf >= " << conf_threshold << " (of " << preds.size()
              << " predictions)\n";
    std::ofstream svg(out_svg);
    if (!svg) throw std::runtime_error("cannot open '" + out_svg + "' for writing");
    write_detection_svg(svg, image, preds, conf_threshold, rh, rw);
    return 0;
}

// ------------------------------------------------------------------ gradcheck

int run_gradcheck(const std::string& arch_path, std::uint64_t seed, int samples, double eps,
                  double tolerance) {
    const auto cfg = load_arch_config(arch_path);
    Rng rng(seed);
    auto model = build_model<double>(cfg, rng, 0.08);

    Tensor<double> image(cfg.input_channels, cfg.reference_height, cfg.reference_width);
    for (auto& v : image.data) v = rng.real01();
    std::vector<BoxTarget> targets;
    for (int i = 0; i < 3; ++i) {
        BoxTarget t;
        t.x = rng.uniform(0.05, 0.55);
        t.y = rng.uniform(0.05, 0.55);
        t.w = rng.uniform(0.05, 0.4);
        t.h = rng.uniform(0.02, 0.2);
        targets.push_back(t);
    }
    const auto report = frozen_matching_gradcheck(model, image, targets, 1000.0, 100.0, rng,
                                                  samples, eps);
    std::printf("loss %.9g\n", report.loss);
    std::printf("checked %d coordinates, max relative error %.3e (tolerance %.1e)\n",
                report.coordinates, report.max_rel_error, tolerance);
    return report.max_rel_error < tolerance ? 0 : 1;
}

// -------------------------------------------------------------------- inspect

void print_inspect_table(const ArchitectureConfig& cfg, int in_h, int in_w,
                         std::int64_t* total_out = nullptr) {
    const auto dims = cfg.map_dims(in_h, in_w);
    char row[160];
    std::printf("%-8s %-8s %-8s %-18s %s\n", "Layer", "Filter", "Stride", "Feature map",
                "Parameters");
    std::printf("%-8s %-8s %-8s %dx(%dx%d)\n", "Input", "/", "/", cfg.input_channels, in_h, in_w);
    std::int64_t total = 0;
    int channels = cfg.input_channels;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        const auto& l = cfg.layers[i];
        const auto& d = dims[i];
        const std::string name = linedet::detail::layer_display_name(cfg, i);
        if (l.type == LayerType::Conv) {
            const std::int64_t params =
                static_cast<std::int64_t>(l.out_channels) * channels * l.kernel_h * l.kernel_w +
                l.out_channels;
            total += params;
            channels = l.out_channels;
            char filt[16], str[16], fmap[32];
            std::snprintf(filt, sizeof(filt), "%dx%d", l.kernel_h, l.kernel_w);
            std::snprintf(str, sizeof(str), "%dx%d", l.stride_y, l.stride_x);
            std::snprintf(fmap, sizeof(fmap), "%dx(%dx%d)", d.channels, d.height, d.width);
            std::snprintf(row, sizeof(row), "%-8s %-8s %-8s %-18s %lld", name.c_str(), filt, str,
                          fmap, static_cast<long long>(params));
        } else if (l.type == LayerType::MdLstm) {
            const std::int64_t params = mdlstm_param_count(channels, channels);
            total += params;
            char fmap[32];
            std::snprintf(fmap, sizeof(fmap), "%dx(%dx%d)", d.channels, d.height, d.width);
            std::snprintf(row, sizeof(row), "%-8s %-8s %-8s %-18s %lld", name.c_str(), "/", "/",
                          fmap, static_cast<long long>(params));
        } else {
            char p[16], fmap[32];
            std::snprintf(p, sizeof(p), "p=%.2f", l.dropout_p);
            std::snprintf(fmap, sizeof(fmap), "%dx(%dx%d)", d.channels, d.height, d.width);
            std::snprintf(row, sizeof(row), "%-8s %-8s %-8s %-18s %s", name.c_str(), p, "/", fmap,
                          "/");
        }
        std::printf("%s\n", row);
    }
    const auto& hd = dims.back();
    const std::int64_t head_params =
        static_cast<std::int64_t>(cfg.head_out_channels()) * channels + cfg.head_out_channels();
    total += head_params;
    char fmap[40];
    std::snprintf(fmap, sizeof(fmap), "5x%dx(%dx%d)", cfg.predictors, hd.height, hd.width);
    std::snprintf(row, sizeof(row), "%-8s %-8s %-8s %-18s %lld", "Output", "1x1", "1x1", fmap,
                  static_cast<long long>(head_params));
    std::printf("%s\n", row);
    std::printf("%-8s %-8s %-8s %-18s %lld\n", "Total", "", "", "",
                static_cast<long long>(total));
    std::printf("Predictions: %d per site over %dx%d = %lld\n", cfg.predictors, hd.height,
                hd.width,
                static_cast<long long>(hd.height) * hd.width * cfg.predictors);
    const auto [mh, mw] = cfg.min_input_size();
    std::printf("Minimal admissible input: %dx%d\n", mh, mw);
    if (total_out) *total_out = total;
}

int run_inspect(const std::string& arch_path, const std::string& model_path, int in_h, int in_w) {
    ArchitectureConfig cfg;
    if (!model_path.empty()) {
        const int prec = stored_precision(model_path);
        if (prec == 4) cfg = load_any_model<float>(model_path).config;
        else cfg = load_any_model<double>(model_path).config;
        std::printf("model %s (%d-bit reals)\n", model_path.c_str(), prec * 8);
    } else {
        cfg = load_arch_config(arch_path);
    }
    if (in_h <= 0) in_h = cfg.reference_height;
    if (in_w <= 0) in_w = cfg.reference_width;
    print_inspect_table(cfg, in_h, in_w);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"linedet: text-line detection with 2D-LSTM convolutional networks"};
    app.require_subcommand(1);

    CommonOpts common;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic page dataset");
    std::string synth_spec, synth_out;
    int synth_count = 200;
    std::uint64_t synth_seed = 1;
    synth->add_option("--spec", synth_spec, "generator spec file (defaults built in)");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of pages");
    synth->add_option("--seed", synth_seed, "generator seed");

    // train
    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_arch, tr_train, tr_val, tr_out, tr_resume;
    TrainConfig tcfg;
    double tr_dropout = -1.0;
    double tr_init = 0.08;
    tr->add_option("--arch", tr_arch, "architecture config file");
    tr->add_option("--train", tr_train, "training dataset directory")->required();
    tr->add_option("--val", tr_val, "validation dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory (checkpoints, metrics.log)")->required();
    tr->add_option("--lr", tcfg.learning_rate, "learning rate (default 1e-4)");
    tr->add_option("--batch", tcfg.batch_size, "minibatch size (default 8)");
    tr->add_option("--epochs", tcfg.epochs, "training epochs");
    tr->add_option("--dropout", tr_dropout, "override dropout probability of every dropout layer");
    tr->add_option("--alpha-match", tcfg.alpha_match, "matching weight (default 1000)");
    tr->add_option("--alpha-loss", tcfg.alpha_loss, "loss weight (default 100)");
    tr->add_option("--seed", tcfg.seed, "training seed");
    tr->add_option("--ckpt-interval", tcfg.checkpoint_interval, "epochs between checkpoints");
    tr->add_option("--eval-iou", tcfg.eval_iou_threshold, "IoU threshold for validation");
    tr->add_option("--init-scale", tr_init, "uniform weight init scale (default 0.08)");
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--precision", common.precision, "32 or 64 (default 32)")
        ->check(CLI::IsMember({32, 64}));
    tr->add_option("--width", common.width, "width-normalize inputs to this many pixels");
    tr->add_flag("--deterministic", common.deterministic, "bit-reproducible mode");
    tr->add_flag("--wavefront", common.wavefront, "anti-diagonal recurrence scheduling");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset");
    std::string ev_model, ev_data, ev_metric = "iou", ev_report = "eval_report.txt";
    std::string ev_thresholds = "0.3,0.5,0.7";
    double ev_conf = 0.5, ev_nms = 0.0;
    ev->add_option("--model", ev_model, "model or checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--metric", ev_metric, "iou or deteval")
        ->check(CLI::IsMember({"iou", "deteval"}));
    ev->add_option("--iou-thresholds", ev_thresholds, "comma-separated list (default 0.3,0.5,0.7)");
    ev->add_option("--conf-threshold", ev_conf, "confidence threshold (default 0.5)");
    ev->add_option("--nms", ev_nms, "apply NMS at this IoU before scoring (default off)");
    ev->add_option("--report", ev_report, "machine-readable report file");
    ev->add_option("--width", common.width, "width-normalize inputs");
    ev->add_flag("--wavefront", common.wavefront, "anti-diagonal recurrence scheduling");

    // detect
    auto* de = app.add_subcommand("detect", "detect lines in one image");
    std::string de_model, de_image, de_out;
    double de_conf = 0.5, de_nms = 0.0;
    de->add_option("--model", de_model, "model or checkpoint file")->required();
    de->add_option("--image", de_image, "input image (binary PGM)")->required();
    de->add_option("--out", de_out, "output SVG path")->required();
    de->add_option("--conf-threshold", de_conf, "confidence threshold (default 0.5)");
    de->add_option("--nms", de_nms, "apply NMS at this IoU (default off)");
    de->add_option("--width", common.width, "width-normalize the input");
    de->add_flag("--wavefront", common.wavefront, "anti-diagonal recurrence scheduling");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check (64-bit)");
    std::string gc_arch;
    std::uint64_t gc_seed = 1;
    int gc_samples = 200;
    double gc_eps = 1e-5, gc_tol = 1e-4;
    gc->add_option("--arch", gc_arch, "architecture config file")->required();
    gc->add_option("--seed", gc_seed, "seed");
    gc->add_option("--samples", gc_samples, "minimum sampled coordinates (default 200)");
    gc->add_option("--eps", gc_eps, "finite-difference step (default 1e-5)");
    gc->add_option("--tolerance", gc_tol, "max relative error to pass (default 1e-4)");

    // inspect
    auto* in = app.add_subcommand("inspect", "print the per-layer architecture table");
    std::string in_arch, in_model;
    int in_h = 0, in_w = 0;
    in->add_option("--arch", in_arch, "architecture config file");
    in->add_option("--model", in_model, "model or checkpoint file");
    in->add_option("--height", in_h, "input height (default: reference)");
    in->add_option("--width", in_w, "input width (default: reference)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) return run_synth(synth_spec, synth_out, synth_count, synth_seed);
        if (*tr) {
            if (tr_arch.empty() && tr_resume.empty())
                throw CLI::RequiredError("--arch (or --resume)");
            if (tr_dropout >= 0.0) tcfg.dropout_override = tr_dropout;
            tcfg.deterministic = common.deterministic;
            tcfg.policy = common.policy();
            tcfg.validate();
            if (common.precision == 64)
                return run_train<double>(tr_arch, tr_train, tr_val, tr_out, tcfg, tr_init,
                                         tr_resume, common);
            return run_train<float>(tr_arch, tr_train, tr_val, tr_out, tcfg, tr_init, tr_resume,
                                    common);
        }
        if (*ev) {
            std::vector<double> thresholds;
            std::stringstream ss(ev_thresholds);
            std::string tok;
            while (std::getline(ss, tok, ','))
                if (!tok.empty()) thresholds.push_back(std::stod(tok));
            if (thresholds.empty()) throw std::invalid_argument("--iou-thresholds is empty");
            if (stored_precision(ev_model) == 8)
                return run_eval<double>(ev_model, ev_data, ev_metric, thresholds, ev_conf, ev_nms,
                                        ev_report, common);
            return run_eval<float>(ev_model, ev_data, ev_metric, thresholds, ev_conf, ev_nms,
                                   ev_report, common);
        }
        if (*de) {
            if (stored_precision(de_model) == 8)
                return run_detect<double>(de_model, de_image, de_out, de_conf, de_nms, common);
            return run_detect<float>(de_model, de_image, de_out, de_conf, de_nms, common);
        }
        if (*gc) return run_gradcheck(gc_arch, gc_seed, gc_samples, gc_eps, gc_tol);
        if (*in) {
            if (in_arch.empty() == in_model.empty())
                throw CLI::RequiredError("exactly one of --arch / --model");
            return run_inspect(in_arch, in_model, in_h, in_w);
        }
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
