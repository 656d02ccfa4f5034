// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "linedet/matching.hpp"
#include "linedet/model.hpp"
#include "linedet/tensor.hpp"

namespace linedet {

/// Confidences are clamped to [eps, 1-eps] inside the log terms so a
/// saturated sigmoid in 32-bit mode cannot produce an infinite loss.
constexpr double kConfidenceClamp = 1e-7;

inline double clamped_log(double c) {
    if (c < kConfidenceClamp) c = kConfidenceClamp;
    if (c > 1.0 - kConfidenceClamp) c = 1.0 - kConfidenceClamp;
    return std::log(c);
}

/// Loss value alone, same terms and summation order as
/// loss_and_output_grads below.
inline double detection_loss(const std::vector<BoxPrediction>& preds,
                             const std::vector<BoxTarget>& targets, const MatchResult& match,
                             double alpha_loss) {
    double loss = 0.0;
    for (const auto& [n, m] : match.pairs) {
        const BoxPrediction& p = preds[static_cast<std::size_t>(m)];
        const BoxTarget& t = targets[static_cast<std::size_t>(n)];
        const double d[4] = {p.x - t.x, p.y - t.y, p.w - t.w, p.h - t.h};
        const double d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3];
        loss += alpha_loss * d2 - clamped_log(p.confidence);
    }
    for (int m : match.unmatched_predictors)
        loss += -clamped_log(1.0 - preds[static_cast<std::size_t>(m)].confidence);
    return loss;
}

/// Matched-pair/unmatched-predictor detection loss:
///   loss = sum_matched [ alpha ||l - t||^2 - log c ] + sum_unmatched [ -log(1 - c) ]
/// and its gradient with respect to the raw head pre-activations, using the
/// closed forms of the sigmoid chain:
///   matched coordinate q:  2 alpha (l_q - t_q) * lambda_q * sig_q (1 - sig_q)
///   matched confidence:   -(1 - c)
///   unmatched confidence: +c
/// grad_raw must be the zero-initialized shape of the raw output; gradients
/// are accumulated into it.
template <typename T>
double loss_and_output_grads(const std::vector<BoxPrediction>& preds,
                             const std::vector<BoxTarget>& targets, const MatchResult& match,
                             double alpha_loss, const PredictorGeometry& geom,
                             Tensor<T>& grad_raw) {
    const int K = grad_raw.channels / 5;
    if (grad_raw.channels % 5 != 0)
        throw std::invalid_argument("loss_and_output_grads: grad_raw channels not a multiple of 5");
    const std::size_t expected =
        static_cast<std::size_t>(grad_raw.height) * grad_raw.width * K;
    if (preds.size() != expected)
        throw std::invalid_argument("loss_and_output_grads: prediction list does not match grad_raw shape");
    if (match.pairs.size() + match.unmatched_predictors.size() != preds.size())
        throw std::invalid_argument(
            "loss_and_output_grads: match does not cover every predictor (stale match?)");

    std::vector<char> seen(preds.size(), 0);
    double loss = 0.0;

    auto raw_index = [&](const BoxPrediction& p, int field) -> T& {
        return grad_raw.at(5 * p.k + field, p.cell_y, p.cell_x);
    };

    for (const auto& [n, m] : match.pairs) {
        if (n < 0 || static_cast<std::size_t>(n) >= targets.size() || m < 0 ||
            static_cast<std::size_t>(m) >= preds.size())
            throw std::invalid_argument("loss_and_output_grads: match indices out of range");
        if (seen[static_cast<std::size_t>(m)]++)
            throw std::invalid_argument("loss_and_output_grads: predictor matched twice");
        const BoxPrediction& p = preds[static_cast<std::size_t>(m)];
        const double t[4] = {targets[static_cast<std::size_t>(n)].x,
                             targets[static_cast<std::size_t>(n)].y,
                             targets[static_cast<std::size_t>(n)].w,
                             targets[static_cast<std::size_t>(n)].h};
        const double l[4] = {p.x, p.y, p.w, p.h};
        const double off[4] = {p.cell_x * geom.delta_x, p.cell_y * geom.delta_y, 0.0, 0.0};
        double d2 = 0.0;
        for (int q = 0; q < 4; ++q) {
            const double d = l[q] - t[q];
            d2 += d * d;
            // recover the sigmoid output from the decoded coordinate
            const double sig = geom.lambda[q] != 0.0 ? (l[q] - off[q]) / geom.lambda[q] : 0.0;
            raw_index(p, q) += static_cast<T>(2.0 * alpha_loss * d * geom.lambda[q] * sig *
                                              (1.0 - sig));
        }
        loss += alpha_loss * d2 - clamped_log(p.confidence);
        raw_index(p, 4) += static_cast<T>(-(1.0 - p.confidence));
    }
    for (int m : match.unmatched_predictors) {
        if (m < 0 || static_cast<std::size_t>(m) >= preds.size())
            throw std::invalid_argument("loss_and_output_grads: match indices out of range");
        if (seen[static_cast<std::size_t>(m)]++)
            throw std::invalid_argument("loss_and_output_grads: predictor listed twice");
        const BoxPrediction& p = preds[static_cast<std::size_t>(m)];
        loss += -clamped_log(1.0 - p.confidence);
        raw_index(p, 4) += static_cast<T>(p.confidence);
    }
    if (loss < 0.0)
        throw std::logic_error("loss_and_output_grads: negative loss " + std::to_string(loss));
    return loss;
}

}  // namespace linedet
