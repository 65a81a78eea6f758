#pragma once

// Scalar reference implementations used by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "pseg/alignment.hpp"
#include "pseg/metrics.hpp"

namespace oracle {

// Masked mean over valid pixels of class m, summed in pixel order.
inline std::optional<std::vector<double>> masked_mean(const std::vector<double>& emb, std::size_t D,
                                                      const pseg::SupervisionMap& s, std::size_t m) {
    const std::size_t P = s.size();
    std::vector<double> acc(D, 0.0);
    std::size_t n = 0;
    for (std::size_t p = 0; p < P; ++p) {
        if (!s.valid[p] || s.labels[p] != static_cast<std::int32_t>(m)) continue;
        ++n;
        for (std::size_t d = 0; d < D; ++d) acc[d] += emb[d * P + p];
    }
    if (n == 0) return std::nullopt;
    for (auto& v : acc) v /= static_cast<double>(n);
    return acc;
}

inline std::optional<double> dice(const pseg::BinaryMask& a, const pseg::BinaryMask& b) {
    double inter = 0, sa = 0, sb = 0;
    for (std::size_t y = 0; y < a.height; ++y)
        for (std::size_t x = 0; x < a.width; ++x) {
            inter += a.at(y, x) && b.at(y, x);
            sa += a.at(y, x);
            sb += b.at(y, x);
        }
    if (sa + sb == 0) return std::nullopt;
    return 2 * inter / (sa + sb);
}

// Inside pixels with a 4-neighbour outside the mask or outside the frame.
inline std::vector<std::pair<long, long>> boundary(const pseg::BinaryMask& m) {
    std::vector<std::pair<long, long>> out;
    const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
    auto inside = [&](long y, long x) {
        return y >= 0 && x >= 0 && y < h && x < w && m.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    };
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            if (inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)))
                out.emplace_back(y, x);
    return out;
}

inline std::optional<double> asd(const pseg::BinaryMask& a, const pseg::BinaryMask& b) {
    const auto ba = boundary(a), bb = boundary(b);
    if (ba.empty() || bb.empty()) return std::nullopt;
    auto directed = [](const auto& from, const auto& to) {
        double total = 0;
        for (auto [y, x] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (auto [v, u] : to) best = std::min(best, std::hypot(double(y - v), double(x - u)));
            total += best;
        }
        return total / static_cast<double>(from.size());
    };
    return 0.5 * (directed(ba, bb) + directed(bb, ba));
}

// Random mask: empty, speckled or a disc.
inline pseg::BinaryMask random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w) {
    pseg::BinaryMask m{h, w, std::vector<std::uint8_t>(h * w, 0)};
    std::uniform_int_distribution<int> kind(0, 3);
    std::uniform_real_distribution<double> u(0, 1);
    const int k = kind(rng);
    if (k == 0) return m;
    if (k == 1) {
        const double p = u(rng);
        for (auto& b : m.bits) b = u(rng) < p;
        return m;
    }
    const double cy = u(rng) * static_cast<double>(h), cx = u(rng) * static_cast<double>(w);
    const double r = 1 + u(rng) * static_cast<double>(std::max(h, w)) / 2;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            m.bits[y * w + x] = std::hypot(double(y) - cy, double(x) - cx) <= r;
    return m;
}

}  // namespace oracle
