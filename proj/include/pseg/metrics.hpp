#pragma once

// Slice-level Dice and average surface distance, and the 2-D PCA projection
// used for feature plots.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;   // non-zero = inside

    std::size_t size() const { return height * width; }
    bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
};

inline BinaryMask class_mask(std::span<const std::uint8_t> labels, std::size_t h, std::size_t w, std::size_t cls) {
    if (labels.size() != h * w) throw ShapeError("class_mask: label count does not match extent");
    BinaryMask m{h, w, std::vector<std::uint8_t>(h * w)};
    for (std::size_t i = 0; i < labels.size(); ++i) m.bits[i] = labels[i] == cls ? 1 : 0;
    return m;
}

namespace detail {
inline void check_same(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.height != b.height || a.width != b.width || a.bits.size() != a.size() || b.bits.size() != b.size()) {
        throw ShapeError(std::string(op) + ": mask shapes " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " and " + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + " differ");
    }
}
}  // namespace detail

// 2|A n B| / (|A| + |B|); nullopt when both masks are empty.
inline std::optional<double> dice(const BinaryMask& pred, const BinaryMask& gt) {
    detail::check_same(pred, gt, "dice");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.bits[i] != 0, g = gt.bits[i] != 0;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return std::nullopt;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

// Mask pixels with a 4-neighbour outside the mask; the frame border counts
// as outside.
inline std::vector<std::size_t> boundary_pixels(const BinaryMask& m) {
    std::vector<std::size_t> out;
    const long H = static_cast<long>(m.height), W = static_cast<long>(m.width);
    auto inside = [&](long y, long x) { return y >= 0 && x >= 0 && y < H && x < W && m.at(y, x); };
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            if (inside(y, x) &&
                (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))) {
                out.push_back(static_cast<std::size_t>(y * W + x));
            }
    return out;
}

namespace detail {

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas).
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
    const std::size_t n = f.size();
    std::vector<std::size_t> v(n);
    std::vector<double> z(n + 1);
    std::size_t k = 0;
    constexpr double inf = std::numeric_limits<double>::infinity();
    // Skip leading infinite samples; they never define the envelope.
    std::size_t first = 0;
    while (first < n && f[first] == inf) ++first;
    if (first == n) {
        std::fill(d.begin(), d.end(), inf);
        return;
    }
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == inf) continue;
        const double fq = f[q] + static_cast<double>(q * q);
        auto meet = [&](std::size_t p) {
            return (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(p));
        };
        double s = meet(v[k]);
        while (k > 0 && s <= z[k]) s = meet(v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

// Exact squared Euclidean distance from every pixel to the nearest seed.
inline std::vector<double> squared_distance_map(const std::vector<std::size_t>& seeds, std::size_t h, std::size_t w) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> g(h * w, inf);
    for (auto s : seeds) g[s] = 0.0;
    std::vector<double> f, d;
    f.resize(h);
    d.resize(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) f[y] = g[y * w + x];
        detail::edt_1d(f, d);
        for (std::size_t y = 0; y < h; ++y) g[y * w + x] = d[y];
    }
    f.resize(w);
    d.resize(w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) f[x] = g[y * w + x];
        detail::edt_1d(f, d);
        for (std::size_t x = 0; x < w; ++x) g[y * w + x] = d[x];
    }
    return g;
}

// Symmetric average surface distance in pixels; nullopt when either
// boundary is empty.
inline std::optional<double> asd(const BinaryMask& pred, const BinaryMask& gt) {
    detail::check_same(pred, gt, "asd");
    const auto bp = boundary_pixels(pred), bg = boundary_pixels(gt);
    if (bp.empty() || bg.empty()) return std::nullopt;
    auto directional = [&](const std::vector<std::size_t>& from, const std::vector<std::size_t>& to) {
        const auto dm = squared_distance_map(to, pred.height, pred.width);
        double total = 0;
        for (auto p : from) total += std::sqrt(dm[p]);
        return total / static_cast<double>(from.size());
    };
    return 0.5 * (directional(bp, bg) + directional(bg, bp));
}

struct ClassMetrics {
    std::size_t class_id = 0;
    std::optional<double> dice;
    std::optional<double> asd;
};

// Foreground classes 1..C-1 of one predicted/ground-truth label map pair.
inline std::vector<ClassMetrics> evaluate_labels(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                                                 std::size_t h, std::size_t w, std::size_t num_classes) {
    if (pred.size() != h * w || gt.size() != h * w) throw ShapeError("evaluate_labels: label count mismatch");
    std::vector<ClassMetrics> out;
    for (std::size_t c = 1; c < num_classes; ++c) {
        const auto p = class_mask(pred, h, w, c), g = class_mask(gt, h, w, c);
        out.push_back({c, dice(p, g), asd(p, g)});
    }
    return out;
}

// ---------------------------------------------------------------- projection

struct Projection2d {
    std::vector<std::array<double, 2>> points;
    std::array<double, 2> eigenvalues{};   // population variances along the two axes
    Eigen::MatrixXd axes;                   // D x 2
};

// Top-2 principal components of the mean-centred vectors. Each axis is
// signed so its largest-magnitude coordinate is positive.
inline Projection2d project_features_2d(const std::vector<std::vector<double>>& vectors) {
    if (vectors.size() < 3) {
        throw std::invalid_argument("project_features_2d: need at least 3 vectors, got " +
                                    std::to_string(vectors.size()));
    }
    const std::size_t n = vectors.size(), D = vectors[0].size();
    if (D == 0) throw ShapeError("project_features_2d: empty vectors");
    Eigen::MatrixXd X(n, D);
    for (std::size_t i = 0; i < n; ++i) {
        if (vectors[i].size() != D) throw ShapeError("project_features_2d: ragged vectors");
        for (std::size_t j = 0; j < D; ++j) X(i, j) = vectors[i][j];
    }
    X.rowwise() -= X.colwise().mean();
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Projection2d out;
    out.axes = Eigen::MatrixXd::Zero(D, 2);
    for (std::size_t k = 0; k < 2 && k < D; ++k) {
        const Eigen::Index col = static_cast<Eigen::Index>(D - 1 - k);
        Eigen::VectorXd a = es.eigenvectors().col(col);
        Eigen::Index arg;
        a.cwiseAbs().maxCoeff(&arg);
        if (a(arg) < 0) a = -a;
        out.axes.col(static_cast<Eigen::Index>(k)) = a;
        out.eigenvalues[k] = std::max(0.0, es.eigenvalues()(col));
    }
    const Eigen::MatrixXd P = X * out.axes;
    out.points.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.points[i] = {P(i, 0), P(i, 1)};
    return out;
}

}  // namespace pseg
