// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "linedet/model.hpp"

namespace linedet {

/// Axis-aligned box, top-left corner plus size.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double area() const { return w * h; }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
    const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    return ix * iy;
}

/// Intersection over union; 0 when both boxes are degenerate or disjoint.
inline double iou(const Box& a, const Box& b) {
    if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0)
        throw std::invalid_argument("iou: boxes must have non-negative sizes");
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

/// Aggregate detection-quality scores. precision/recall aggregate the match
/// scores of the underlying protocol; counts report whole objects (matched
/// references, spurious hypotheses, missed references).
struct EvalReport {
    std::string metric;
    double precision = 0, recall = 0, f_measure = 0;
    long matched = 0, insertions = 0, deletions = 0;
    std::vector<std::pair<std::string, double>> thresholds;
};

inline double f_measure_of(double precision, double recall) {
    if (precision + recall <= 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

/// Page-level tallies for the IoU protocol; sum them over pages, then build
/// one report.
struct IouCounts {
    long matched = 0;
    long kept_hypotheses = 0;
    long references = 0;

    IouCounts& operator+=(const IouCounts& o) {
        matched += o.matched;
        kept_hypotheses += o.kept_hypotheses;
        references += o.references;
        return *this;
    }
};

/// Greedy one-to-one matching in descending IoU order: hypotheses below the
/// confidence threshold are dropped, a pair is accepted when both sides are
/// still free and its IoU reaches the threshold.
inline IouCounts iou_match_counts(const std::vector<Box>& hyps,
                                  const std::vector<double>& confidences,
                                  const std::vector<Box>& refs, double iou_threshold,
                                  double conf_threshold) {
    if (!confidences.empty() && confidences.size() != hyps.size())
        throw std::invalid_argument("iou_match_counts: confidence list does not match hypotheses");
    IouCounts counts;
    counts.references = static_cast<long>(refs.size());
    std::vector<int> kept;
    for (std::size_t i = 0; i < hyps.size(); ++i)
        if (confidences.empty() || confidences[i] >= conf_threshold)
            kept.push_back(static_cast<int>(i));
    counts.kept_hypotheses = static_cast<long>(kept.size());

    struct Cand {
        double score;
        int hyp, ref;
    };
    std::vector<Cand> cands;
    for (std::size_t ki = 0; ki < kept.size(); ++ki) {
        for (std::size_t r = 0; r < refs.size(); ++r) {
            const double s = iou(hyps[static_cast<std::size_t>(kept[ki])], refs[r]);
            if (s >= iou_threshold && s > 0.0)
                cands.push_back({s, kept[ki], static_cast<int>(r)});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.hyp != b.hyp) return a.hyp < b.hyp;
        return a.ref < b.ref;
    });
    std::vector<char> hyp_used(hyps.size(), 0), ref_used(refs.size(), 0);
    for (const auto& c : cands) {
        if (hyp_used[static_cast<std::size_t>(c.hyp)] || ref_used[static_cast<std::size_t>(c.ref)])
            continue;
        hyp_used[static_cast<std::size_t>(c.hyp)] = 1;
        ref_used[static_cast<std::size_t>(c.ref)] = 1;
        ++counts.matched;
    }
    return counts;
}

inline EvalReport iou_report(const IouCounts& counts, double iou_threshold,
                             double conf_threshold) {
    EvalReport r;
    r.metric = "iou";
    r.matched = counts.matched;
    r.insertions = counts.kept_hypotheses - counts.matched;
    r.deletions = counts.references - counts.matched;
    r.precision = counts.kept_hypotheses > 0
                      ? static_cast<double>(counts.matched) / counts.kept_hypotheses
                      : 0.0;
    r.recall = counts.references > 0 ? static_cast<double>(counts.matched) / counts.references
                                     : 0.0;
    r.f_measure = f_measure_of(r.precision, r.recall);
    r.thresholds = {{"iou_threshold", iou_threshold}, {"conf_threshold", conf_threshold}};
    return r;
}

inline EvalReport iou_fmeasure(const std::vector<Box>& hyps, const std::vector<double>& confidences,
                               const std::vector<Box>& refs, double iou_threshold,
                               double conf_threshold) {
    if (iou_threshold < 0.0 || iou_threshold > 1.0 || conf_threshold < 0.0 || conf_threshold > 1.0)
        throw std::invalid_argument("iou_fmeasure: thresholds must lie in [0, 1]");
    return iou_report(iou_match_counts(hyps, confidences, refs, iou_threshold, conf_threshold),
                      iou_threshold, conf_threshold);
}

/// Page-level tallies for the area-overlap protocol.
struct DetevalCounts {
    double recall_score = 0.0;     // sum of per-reference match scores
    double precision_score = 0.0;  // sum of per-hypothesis match scores
    long references = 0;
    long hypotheses = 0;
    long matched_references = 0;
    long matched_hypotheses = 0;
    long excluded_degenerate = 0;

    DetevalCounts& operator+=(const DetevalCounts& o) {
        recall_score += o.recall_score;
        precision_score += o.precision_score;
        references += o.references;
        hypotheses += o.hypotheses;
        matched_references += o.matched_references;
        matched_hypotheses += o.matched_hypotheses;
        excluded_degenerate += o.excluded_degenerate;
        return *this;
    }
};

/// Area-overlap protocol with many-to-many matches. sigma holds area recall
/// (|ref ∩ hyp| / |ref|), tau area precision (|ref ∩ hyp| / |hyp|).
/// A one-to-one match scores 1 on both sides. One reference covered by
/// several hypotheses (a split: each hypothesis passes t_p, their summed
/// recall passes t_r) scores the fragmentation penalty f on the recall side.
/// One hypothesis covering several references (a merge: each reference
/// passes t_r, the summed precision passes t_p) scores f on the precision
/// side. Participants that match exactly one counterpart score 1.
inline DetevalCounts deteval_match_counts(const std::vector<Box>& hyps,
                                          const std::vector<Box>& refs, double t_r = 0.8,
                                          double t_p = 0.4, double fragmentation = 0.8) {
    DetevalCounts counts;
    std::vector<Box> h, g;
    for (const auto& b : hyps) {
        if (b.area() <= 0.0) {
            ++counts.excluded_degenerate;
            continue;
        }
        h.push_back(b);
    }
    for (const auto& b : refs) {
        if (b.area() <= 0.0) {
            ++counts.excluded_degenerate;
            continue;
        }
        g.push_back(b);
    }
    const std::size_t ng = g.size(), nh = h.size();
    counts.references = static_cast<long>(ng);
    counts.hypotheses = static_cast<long>(nh);
    if (ng == 0 || nh == 0) return counts;

    std::vector<double> sigma(ng * nh), tau(ng * nh);
    for (std::size_t i = 0; i < ng; ++i) {
        for (std::size_t j = 0; j < nh; ++j) {
            const double inter = intersection_area(g[i], h[j]);
            sigma[i * nh + j] = inter / g[i].area();
            tau[i * nh + j] = inter / h[j].area();
        }
    }
    std::vector<double> match_g(ng, 0.0), match_d(nh, 0.0);
    std::vector<char> g_taken(ng, 0), d_taken(nh, 0);

    // one-to-one: the only qualifying entry in both its row and its column
    for (std::size_t i = 0; i < ng; ++i) {
        for (std::size_t j = 0; j < nh; ++j) {
            if (sigma[i * nh + j] < t_r || tau[i * nh + j] < t_p) continue;
            bool unique = true;
            for (std::size_t jj = 0; jj < nh && unique; ++jj)
                if (jj != j && sigma[i * nh + jj] >= t_r && tau[i * nh + jj] >= t_p) unique = false;
            for (std::size_t ii = 0; ii < ng && unique; ++ii)
                if (ii != i && sigma[ii * nh + j] >= t_r && tau[ii * nh + j] >= t_p) unique = false;
            if (unique) {
                match_g[i] = 1.0;
                match_d[j] = 1.0;
                g_taken[i] = 1;
                d_taken[j] = 1;
            }
        }
    }
    // splits: one reference covered by several free hypotheses
    for (std::size_t i = 0; i < ng; ++i) {
        if (g_taken[i]) continue;
        std::vector<std::size_t> set;
        double sum_sigma = 0.0;
        for (std::size_t j = 0; j < nh; ++j) {
            if (d_taken[j]) continue;
            if (tau[i * nh + j] >= t_p && sigma[i * nh + j] > 0.0) {
                set.push_back(j);
                sum_sigma += sigma[i * nh + j];
            }
        }
        if (set.size() >= 2 && sum_sigma >= t_r) {
            match_g[i] = fragmentation;
            g_taken[i] = 1;
            for (std::size_t j : set) {
                match_d[j] = 1.0;  // each hypothesis matches a single reference
                d_taken[j] = 1;
            }
        }
    }
    // merges: one hypothesis covering several free references
    for (std::size_t j = 0; j < nh; ++j) {
        if (d_taken[j]) continue;
        std::vector<std::size_t> set;
        double sum_tau = 0.0;
        for (std::size_t i = 0; i < ng; ++i) {
            if (g_taken[i]) continue;
            if (sigma[i * nh + j] >= t_r && tau[i * nh + j] > 0.0) {
                set.push_back(i);
                sum_tau += tau[i * nh + j];
            }
        }
        if (set.size() >= 2 && sum_tau >= t_p) {
            match_d[j] = fragmentation;
            d_taken[j] = 1;
            for (std::size_t i : set) {
                match_g[i] = 1.0;  // each reference matches a single hypothesis
                g_taken[i] = 1;
            }
        }
    }
    for (std::size_t i = 0; i < ng; ++i) {
        counts.recall_score += match_g[i];
        if (match_g[i] > 0.0) ++counts.matched_references;
    }
    for (std::size_t j = 0; j < nh; ++j) {
        counts.precision_score += match_d[j];
        if (match_d[j] > 0.0) ++counts.matched_hypotheses;
    }
    return counts;
}

inline EvalReport deteval_report(const DetevalCounts& counts, double t_r, double t_p,
                                 double fragmentation) {
    EvalReport r;
    r.metric = "deteval";
    r.matched = counts.matched_references;
    r.insertions = counts.hypotheses - counts.matched_hypotheses;
    r.deletions = counts.references - counts.matched_references;
    r.precision = counts.hypotheses > 0 ? counts.precision_score / counts.hypotheses : 0.0;
    r.recall = counts.references > 0 ? counts.recall_score / counts.references : 0.0;
    r.f_measure = f_measure_of(r.precision, r.recall);
    r.thresholds = {{"area_recall_threshold", t_r},
                    {"area_precision_threshold", t_p},
                    {"fragmentation_penalty", fragmentation}};
    return r;
}

inline EvalReport deteval(const std::vector<Box>& hyps, const std::vector<Box>& refs,
                          double t_r = 0.8, double t_p = 0.4, double fragmentation = 0.8) {
    if (t_r <= 0.0 || t_r > 1.0 || t_p <= 0.0 || t_p > 1.0)
        throw std::invalid_argument("deteval: thresholds must lie in (0, 1]");
    return deteval_report(deteval_match_counts(hyps, refs, t_r, t_p, fragmentation), t_r, t_p,
                          fragmentation);
}

/// Counts for several confidence thresholds at once, computing the IoU
/// matrix a single time. Element i of the result equals
/// iou_match_counts(hyps, confidences, refs, iou_threshold, conf_thresholds[i]).
inline std::vector<IouCounts> iou_sweep_counts(const std::vector<Box>& hyps,
                                               const std::vector<double>& confidences,
                                               const std::vector<Box>& refs, double iou_threshold,
                                               const std::vector<double>& conf_thresholds) {
    struct Cand {
        double score;
        int hyp, ref;
    };
    std::vector<Cand> cands;
    for (std::size_t hi = 0; hi < hyps.size(); ++hi) {
        for (std::size_t r = 0; r < refs.size(); ++r) {
            const double s = iou(hyps[hi], refs[r]);
            if (s >= iou_threshold && s > 0.0)
                cands.push_back({s, static_cast<int>(hi), static_cast<int>(r)});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.hyp != b.hyp) return a.hyp < b.hyp;
        return a.ref < b.ref;
    });
    std::vector<IouCounts> out;
    out.reserve(conf_thresholds.size());
    std::vector<char> hyp_used(hyps.size()), ref_used(refs.size());
    for (double ct : conf_thresholds) {
        IouCounts counts;
        counts.references = static_cast<long>(refs.size());
        for (std::size_t hi = 0; hi < hyps.size(); ++hi)
            if (confidences.empty() || confidences[hi] >= ct) ++counts.kept_hypotheses;
        std::fill(hyp_used.begin(), hyp_used.end(), 0);
        std::fill(ref_used.begin(), ref_used.end(), 0);
        for (const auto& c : cands) {
            if (!confidences.empty() && confidences[static_cast<std::size_t>(c.hyp)] < ct) continue;
            if (hyp_used[static_cast<std::size_t>(c.hyp)] ||
                ref_used[static_cast<std::size_t>(c.ref)])
                continue;
            hyp_used[static_cast<std::size_t>(c.hyp)] = 1;
            ref_used[static_cast<std::size_t>(c.ref)] = 1;
            ++counts.matched;
        }
        out.push_back(counts);
    }
    return out;
}

/// Greedy non-maximum suppression by descending confidence; disabled unless
/// explicitly requested on the command line.
inline std::vector<BoxPrediction> nms(std::vector<BoxPrediction> preds, double iou_threshold) {
    std::stable_sort(preds.begin(), preds.end(), [](const BoxPrediction& a, const BoxPrediction& b) {
        return a.confidence > b.confidence;
    });
    std::vector<BoxPrediction> kept;
    for (const auto& p : preds) {
        bool suppressed = false;
        for (const auto& q : kept) {
            if (iou(Box{p.x, p.y, p.w, p.h}, Box{q.x, q.y, q.w, q.h}) >= iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(p);
    }
    return kept;
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
    os << "metric " << r.metric << "\n";
    for (const auto& [k, v] : r.thresholds) os << k << " " << v << "\n";
    os << "precision " << r.precision << "\n";
    os << "recall " << r.recall << "\n";
    os << "f_measure " << r.f_measure << "\n";
    os << "matched " << r.matched << "\n";
    os << "insertions " << r.insertions << "\n";
    os << "deletions " << r.deletions << "\n";
}

}  // namespace linedet
