#pragma once

// Base objectives (segmentation, cycle, least-squares adversarial) and the
// weighted total with the prototype losses.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pseg/ops.hpp"

namespace pseg {

struct LossWeights {
    double lambda1 = 0.05;   // L_sim
    double lambda2 = 0.02;   // L_cl
    double seg = 1.0;
    double cycle = 10.0;
    double adv_img = 1.0;
    double adv_seg = 1.0;
};

struct SegLossConfig {
    double ce_weight = 1.0;
    double dice_weight = 1.0;
    double dice_smooth = 1.0;
};

namespace detail {

template <class T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels, const Shape& logits_shape) {
    const std::size_t N = logits_shape[0], C = logits_shape[1], P = logits_shape[2] * logits_shape[3];
    if (labels.size() != N * P) {
        throw ShapeError("loss_seg: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits_shape));
    }
    std::vector<T> v(N * C * P, T(0));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t c = labels[n * P + p];
            if (c >= C) {
                throw DomainError("loss_seg: label " + std::to_string(c) + " outside [0," +
                                  std::to_string(C) + ")");
            }
            v[(n * C + c) * P + p] = T(1);
        }
    return Tensor<T>::constant(logits_shape, std::move(v));
}

// Sums an (N,C,H,W) tensor down to (C).
template <class T>
Tensor<T> per_channel_sum(const Tensor<T>& x) {
    return sum(sum(sum(x, 3), 2), 0);
}

}  // namespace detail

// Pixel-mean cross entropy.
template <class T>
Tensor<T> loss_ce(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    detail::check_rank4(logits, "loss_ce");
    const Tensor<T> oh = detail::one_hot<T>(labels, logits.shape());
    const T pixels = static_cast<T>(logits.dim(0) * logits.dim(2) * logits.dim(3));
    return div_scalar(neg(sum(mul(oh, log_softmax_channel(logits)))), pixels);
}

// 1 - mean_c (2 sum(p g) + s) / (sum p + sum g + s), pooled over the batch.
template <class T>
Tensor<T> loss_soft_dice(const Tensor<T>& logits, std::span<const std::uint8_t> labels, double smooth = 1.0) {
    detail::check_rank4(logits, "loss_soft_dice");
    const Tensor<T> oh = detail::one_hot<T>(labels, logits.shape());
    const Tensor<T> p = softmax_channel(logits);
    const Tensor<T> inter = detail::per_channel_sum(mul(p, oh));
    const Tensor<T> denom = add(detail::per_channel_sum(p), detail::per_channel_sum(oh));
    const T s = static_cast<T>(smooth);
    const Tensor<T> dice = div(add_scalar(scale(inter, T(2)), s), add_scalar(denom, s));
    return T(1) - mean(dice);
}

template <class T>
Tensor<T> loss_seg(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                   const SegLossConfig& cfg = {}) {
    Tensor<T> total = Tensor<T>::scalar(T(0));
    if (cfg.ce_weight != 0.0) total = add(total, scale(loss_ce(logits, labels), static_cast<T>(cfg.ce_weight)));
    if (cfg.dice_weight != 0.0) {
        total = add(total, scale(loss_soft_dice(logits, labels, cfg.dice_smooth), static_cast<T>(cfg.dice_weight)));
    }
    return total;
}

// Mean absolute error.
template <class T>
Tensor<T> loss_cycle(const Tensor<T>& original, const Tensor<T>& reconstructed) {
    if (original.shape() != reconstructed.shape()) {
        throw ShapeError("loss_cycle: shapes " + shape_str(original.shape()) + " and " +
                         shape_str(reconstructed.shape()) + " differ");
    }
    return mean(abs(sub(original, reconstructed)));
}

enum class GanSide { discriminator, generator };

// discriminator: mean((real-1)^2) + mean(fake^2); generator: mean((fake-1)^2).
template <class T>
Tensor<T> loss_lsgan(const std::optional<Tensor<T>>& real, const Tensor<T>& fake, GanSide side) {
    if (!fake.defined()) throw std::invalid_argument("loss_lsgan: fake scores required");
    auto sq_to = [](const Tensor<T>& x, T target) {
        const Tensor<T> d = add_scalar(x, -target);
        return mean(mul(d, d));
    };
    if (side == GanSide::generator) return sq_to(fake, T(1));
    if (!real || !real->defined()) throw std::invalid_argument("loss_lsgan: discriminator side needs real scores");
    return add(sq_to(*real, T(1)), sq_to(fake, T(0)));
}

template <class T>
struct BaseComponents {
    Tensor<T> seg;
    Tensor<T> cycle;
    Tensor<T> adv_img;
    Tensor<T> adv_seg;
};

template <class T>
struct TotalLoss {
    Tensor<T> all;
    Tensor<T> base;
};

// L_all = L_base + lambda1 L_sim + lambda2 L_cl. A zero lambda leaves its
// term out of the graph, so L_all is bitwise L_base when both are zero.
template <class T>
TotalLoss<T> loss_all(const BaseComponents<T>& c, const Tensor<T>& l_sim, const Tensor<T>& l_cl,
                      const LossWeights& w) {
    auto check = [](const Tensor<T>& t, const char* name) {
        if (!t.defined() || t.numel() != 1) throw ShapeError(std::string("loss_all: ") + name + " is not a scalar");
        if (!std::isfinite(static_cast<double>(t.item()))) {
            throw DomainError(std::string("loss_all: non-finite ") + name + " = " + std::to_string(t.item()));
        }
    };
    check(c.seg, "seg");
    check(c.cycle, "cycle");
    check(c.adv_img, "adv_img");
    check(c.adv_seg, "adv_seg");
    check(l_sim, "sim");
    check(l_cl, "cl");
    for (double x : {w.lambda1, w.lambda2, w.seg, w.cycle, w.adv_img, w.adv_seg}) {
        if (!(x >= 0.0)) throw DomainError("loss_all: weights must be non-negative");
    }
    Tensor<T> base = add(add(scale(c.seg, static_cast<T>(w.seg)), scale(c.cycle, static_cast<T>(w.cycle))),
                         add(scale(c.adv_img, static_cast<T>(w.adv_img)), scale(c.adv_seg, static_cast<T>(w.adv_seg))));
    Tensor<T> all = base;
    if (w.lambda1 != 0.0) all = add(all, scale(l_sim, static_cast<T>(w.lambda1)));
    if (w.lambda2 != 0.0) all = add(all, scale(l_cl, static_cast<T>(w.lambda2)));
    return {all, base};
}

}  // namespace pseg
