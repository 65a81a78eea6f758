#pragma once

// Class-wise prototypes and the similarity loss L_sim = L_sc + L_dc.
//
// A prototype is the mean embedding of the pixels assigned to one class in
// one image. L_sc pulls every pixel embedding towards its class prototype
// (1 - cos), L_dc pushes prototypes of different classes apart (1 + cos,
// averaged over unordered pairs).

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/ops.hpp"

namespace pseg {

// Which path of the translation cycle produced a prototype.
enum class ProtoDomain : std::uint8_t { s, s2t, t, t2s };

inline const char* proto_domain_name(ProtoDomain d) {
    switch (d) {
        case ProtoDomain::s: return "s";
        case ProtoDomain::s2t: return "s->t";
        case ProtoDomain::t: return "t";
        case ProtoDomain::t2s: return "t->s";
    }
    return "?";
}

template <class T>
struct Prototype {
    std::size_t class_id = 0;
    Tensor<T> vector;          // (D), carries the graph back to the embedding
    ProtoDomain domain = ProtoDomain::s;
    std::size_t pixel_count = 0;
};

// Per-pixel class labels with a validity mask (false = ignored pixel).
struct SupervisionMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> labels;
    std::vector<std::uint8_t> valid;

    std::size_t size() const { return height * width; }

    std::vector<std::size_t> pixels_of(std::size_t cls) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (valid[i] && labels[i] == static_cast<std::int32_t>(cls)) idx.push_back(i);
        return idx;
    }
};

struct AlignmentConfig {
    double confidence_threshold = 0.9;
    std::size_t min_pixels = 4;
    bool include_background = false;
};

namespace detail {
template <class T>
void check_chw(const Tensor<T>& t, const char* op) {
    if (t.rank() != 3) throw ShapeError(std::string(op) + ": expected (C,H,W), got " + shape_str(t.shape()));
}
}  // namespace detail

// Argmax labels (ties -> lowest class); valid where max prob >= threshold.
template <class T>
SupervisionMap confidence_mask(const Tensor<T>& probs, double threshold) {
    detail::check_chw(probs, "confidence_mask");
    if (!(threshold > 0.0 && threshold <= 1.0)) {
        throw DomainError("confidence_mask: threshold " + std::to_string(threshold) + " outside (0,1]");
    }
    const std::size_t C = probs.dim(0), H = probs.dim(1), W = probs.dim(2), P = H * W;
    SupervisionMap s{H, W, std::vector<std::int32_t>(P), std::vector<std::uint8_t>(P)};
    const auto v = probs.data();
    for (std::size_t p = 0; p < P; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (v[c * P + p] > v[best * P + p]) best = c;
        s.labels[p] = static_cast<std::int32_t>(best);
        s.valid[p] = static_cast<double>(v[best * P + p]) >= threshold ? 1 : 0;
    }
    return s;
}

// Argmax of class scores with every pixel valid.
template <class T>
SupervisionMap argmax_supervision(const Tensor<T>& scores) {
    detail::check_chw(scores, "argmax_supervision");
    const std::size_t C = scores.dim(0), H = scores.dim(1), W = scores.dim(2), P = H * W;
    SupervisionMap s{H, W, std::vector<std::int32_t>(P), std::vector<std::uint8_t>(P, 1)};
    const auto v = scores.data();
    for (std::size_t p = 0; p < P; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (v[c * P + p] > v[best * P + p]) best = c;
        s.labels[p] = static_cast<std::int32_t>(best);
    }
    return s;
}

// Classes a prototype is requested for: foreground 1..C-1, plus 0 if asked.
inline std::vector<std::size_t> prototype_classes(std::size_t num_classes, bool include_background) {
    std::vector<std::size_t> out;
    for (std::size_t c = include_background ? 0 : 1; c < num_classes; ++c) out.push_back(c);
    return out;
}

// Mean embedding per class over valid pixels. Classes with fewer than
// `min_pixels` valid pixels are left out of the result.
template <class T>
std::vector<Prototype<T>> compute_prototypes(const Tensor<T>& embedding, const SupervisionMap& sup,
                                             const std::vector<std::size_t>& classes,
                                             std::size_t min_pixels = 4,
                                             ProtoDomain domain = ProtoDomain::s) {
    detail::check_chw(embedding, "compute_prototypes");
    if (embedding.dim(1) != sup.height || embedding.dim(2) != sup.width) {
        throw ShapeError("compute_prototypes: embedding " + shape_str(embedding.shape()) +
                         " not aligned with supervision " + std::to_string(sup.height) + "x" +
                         std::to_string(sup.width));
    }
    const std::size_t D = embedding.dim(0);
    const Tensor<T> flat = reshape(embedding, Shape{D, sup.size()});
    std::vector<Prototype<T>> out;
    for (std::size_t m : classes) {
        auto idx = sup.pixels_of(m);
        if (idx.empty() || idx.size() < min_pixels) continue;
        const std::size_t n = idx.size();
        Tensor<T> proto = div_scalar(sum(gather(flat, 1, std::move(idx)), 1), static_cast<T>(n));
        out.push_back({m, std::move(proto), domain, n});
    }
    return out;
}

// cos(u, z_j) for every column z_j of Z (D,N); u has D elements.
// Denominator max(|u||z_j|, 1e-8), so a zero vector gives similarity 0.
template <class T>
Tensor<T> cosine_columns(const Tensor<T>& u, const Tensor<T>& Z) {
    if (Z.rank() != 2 || u.numel() != Z.dim(0)) {
        throw ShapeError("cosine_columns: vector of " + std::to_string(u.numel()) +
                         " elements vs matrix " + shape_str(Z.shape()));
    }
    const Tensor<T> ucol = reshape(u, Shape{Z.dim(0), 1});
    const Tensor<T> dot = sum(mul(Z, ucol), 0);
    const Tensor<T> znorm = sqrt(sum(mul(Z, Z), 0));
    const Tensor<T> unorm = sqrt(sum(mul(ucol, ucol)));
    return div(dot, clamp_min(mul(znorm, unorm), T(1e-8)));
}

template <class T>
Tensor<T> cosine(const Tensor<T>& u, const Tensor<T>& v) {
    return reshape(cosine_columns(u, reshape(v, Shape{v.numel(), 1})), Shape{});
}

// (1/C) sum_m (1/N_m) sum_{i in m} (1 - cos(c_m, z_i)); exact 0 when no
// prototypes are given.
template <class T>
Tensor<T> loss_sc(const Tensor<T>& embedding, const SupervisionMap& sup,
                  const std::vector<Prototype<T>>& prototypes) {
    detail::check_chw(embedding, "loss_sc");
    if (embedding.dim(1) != sup.height || embedding.dim(2) != sup.width) {
        throw ShapeError("loss_sc: embedding not aligned with supervision");
    }
    if (prototypes.empty()) return Tensor<T>::scalar(T(0));
    const std::size_t D = embedding.dim(0);
    const Tensor<T> flat = reshape(embedding, Shape{D, sup.size()});
    std::vector<Tensor<T>> terms;
    for (const auto& p : prototypes) {
        auto idx = sup.pixels_of(p.class_id);
        if (idx.empty()) continue;
        const Tensor<T> cos = cosine_columns(p.vector, gather(flat, 1, std::move(idx)));
        terms.push_back(reshape(mean(T(1) - cos), Shape{1}));
    }
    if (terms.empty()) return Tensor<T>::scalar(T(0));
    return mean(concat(terms, 0));
}

// (1/N_c) sum_{m<n} (1 + cos(c_m, c_n)); exact 0 for fewer than two prototypes.
template <class T>
Tensor<T> loss_dc(const std::vector<Prototype<T>>& prototypes) {
    const std::size_t C = prototypes.size();
    if (C < 2) return Tensor<T>::scalar(T(0));
    std::vector<Tensor<T>> terms;
    for (std::size_t m = 0; m < C; ++m)
        for (std::size_t n = m + 1; n < C; ++n)
            terms.push_back(reshape(T(1) + cosine(prototypes[m].vector, prototypes[n].vector), Shape{1}));
    return mean(concat(terms, 0));
}

template <class T>
Tensor<T> loss_sim(const Tensor<T>& embedding, const SupervisionMap& sup,
                   const std::vector<Prototype<T>>& prototypes) {
    return add(loss_sc(embedding, sup, prototypes), loss_dc(prototypes));
}

}  // namespace pseg
