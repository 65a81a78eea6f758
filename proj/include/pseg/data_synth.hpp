#pragma once

// Synthetic two-domain heart-like slices, preprocessing, augmentation and
// the dataset directory layout.
//
// Every slice shows the same family of structures: a left-ventricle cavity
// (LVC) wrapped in a myocardium ring (MYO), an atrium (LAC) ellipse beside
// it and a small aorta (AA) disc. Both domains share geometry statistics;
// they differ only in how classes map to intensities and in noise, which is
// the controlled domain shift.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseg/networks.hpp"
#include "pseg/tensor_io.hpp"

namespace pseg {

inline constexpr std::size_t kAA = 1, kLAC = 2, kLVC = 3, kMYO = 4;

inline const char* class_name(std::size_t c) {
    static const char* names[] = {"BG", "AA", "LAC", "LVC", "MYO"};
    return c < 5 ? names[c] : "?";
}

struct IntensityProfile {
    std::vector<double> mean;   // per class, background first
    double noise = 0.05;        // Gaussian std
    double bias = 0.0;          // amplitude of a random linear bias field
};

struct SynthConfig {
    std::size_t image_size = 32;
    std::size_t num_foreground_classes = 4;
    std::size_t source_count = 200;
    std::size_t target_count = 200;   // unlabeled training slices
    std::size_t test_count = 50;      // held-out labeled target slices
    std::uint64_t seed = 7;

    // Geometry, in fractions of the image size.
    double lv_radius_min = 0.08, lv_radius_max = 0.11;
    double myo_thickness_min = 0.05, myo_thickness_max = 0.07;
    double la_radius_min = 0.08, la_radius_max = 0.10;
    double aa_radius_min = 0.045, aa_radius_max = 0.06;
    double center_jitter = 0.04;
    double scale_jitter = 0.1;

    IntensityProfile source{{0.15, 0.85, 0.85, 0.85, 0.35}, 0.05, 0.0};
    IntensityProfile target{{0.55, 0.25, 0.25, 0.25, 0.80}, 0.08, 0.10};
};

struct DomainSample {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> image;                       // 1xHxW in [-1,1]
    std::optional<std::vector<std::uint8_t>> label;  // HxW class map
    Domain domain = Domain::source;
    std::string id;
};

// Structure placement for one slice.
struct HeartGeometry {
    double cx = 0, cy = 0;   // LV centre in pixels
    double angle = 0;
    double scale = 1;
    double lv_r = 0, myo_t = 0, la_a = 0, la_b = 0, aa_r = 0;
};

namespace detail {

inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

// Offsets of the LA and AA centres from the LV centre in the heart frame.
inline void structure_offsets(const HeartGeometry& g, double& lax, double& lay, double& aax, double& aay) {
    const double outer = g.lv_r + g.myo_t;
    lax = -(outer + 0.3 * g.la_a);
    lay = -0.5 * outer;
    aax = 0.2 * outer;
    aay = -(outer + 0.3 * g.aa_r);
}

// Largest distance from the LV centre any structure reaches, in pixels.
inline double geometry_extent(const HeartGeometry& g) {
    double lax, lay, aax, aay;
    structure_offsets(g, lax, lay, aax, aay);
    const double outer = g.lv_r + g.myo_t;
    return g.scale * std::max({outer, std::hypot(lax, lay) + std::max(g.la_a, g.la_b),
                               std::hypot(aax, aay) + g.aa_r});
}

}  // namespace detail

inline void validate(const SynthConfig& c) {
    if (c.image_size == 0 || c.image_size % kDownsampleFactor != 0) {
        throw std::invalid_argument("synth: image_size must be a positive multiple of " +
                                    std::to_string(kDownsampleFactor));
    }
    if (c.source_count == 0 || c.target_count == 0 || c.test_count == 0) {
        throw std::invalid_argument("synth: sample counts must be >= 1");
    }
    if (c.num_foreground_classes != 4) {
        throw std::invalid_argument("synth: the heart layout has exactly 4 foreground classes");
    }
    for (const auto* p : {&c.source, &c.target}) {
        if (p->mean.size() != c.num_foreground_classes + 1) {
            throw std::invalid_argument("synth: intensity profile needs one mean per class");
        }
        if (p->noise < 0 || p->bias < 0) throw std::invalid_argument("synth: negative noise level");
    }
    auto range_ok = [](double lo, double hi) { return lo > 0 && lo <= hi; };
    if (!range_ok(c.lv_radius_min, c.lv_radius_max) || !range_ok(c.myo_thickness_min, c.myo_thickness_max) ||
        !range_ok(c.la_radius_min, c.la_radius_max) || !range_ok(c.aa_radius_min, c.aa_radius_max) ||
        c.center_jitter < 0 || c.scale_jitter < 0 || c.scale_jitter >= 1) {
        throw std::invalid_argument("synth: bad geometry ranges");
    }
    // Worst case: every radius at its maximum, largest scale, full jitter.
    const double H = static_cast<double>(c.image_size);
    HeartGeometry g;
    g.scale = 1 + c.scale_jitter;
    g.lv_r = c.lv_radius_max * H;
    g.myo_t = c.myo_thickness_max * H;
    g.la_a = c.la_radius_max * H;
    g.la_b = 0.8 * g.la_a;
    g.aa_r = c.aa_radius_max * H;
    const double reach = detail::geometry_extent(g) + c.center_jitter * H;
    if (reach > 0.5 * H - 0.5) {
        throw std::invalid_argument("synth: degenerate geometry, structures reach " + std::to_string(reach) +
                                    " px from the centre but the frame allows " + std::to_string(0.5 * H - 0.5));
    }
}

inline HeartGeometry sample_geometry(const SynthConfig& c, std::mt19937_64& rng) {
    const double H = static_cast<double>(c.image_size);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    HeartGeometry g;
    g.lv_r = in(c.lv_radius_min, c.lv_radius_max) * H;
    g.myo_t = in(c.myo_thickness_min, c.myo_thickness_max) * H;
    g.la_a = in(c.la_radius_min, c.la_radius_max) * H;
    g.la_b = in(0.6, 0.8) * g.la_a;
    g.aa_r = in(c.aa_radius_min, c.aa_radius_max) * H;
    g.scale = in(1 - c.scale_jitter, 1 + c.scale_jitter);
    g.angle = in(-std::numbers::pi / 6, std::numbers::pi / 6);
    // Keep the whole heart in frame, then jitter.
    double lax, lay, aax, aay;
    detail::structure_offsets(g, lax, lay, aax, aay);
    const double j = c.center_jitter * H;
    g.cx = 0.5 * (H - 1) + in(-j, j) - 0.25 * g.scale * (lax + aax);
    g.cy = 0.5 * (H - 1) + in(-j, j) - 0.25 * g.scale * (lay + aay);
    const double reach = detail::geometry_extent(g);
    g.cx = std::clamp(g.cx, reach, H - 1 - reach);
    g.cy = std::clamp(g.cy, reach, H - 1 - reach);
    return g;
}

// Class map rendered by pixel centres; later structures paint over earlier.
inline std::vector<std::uint8_t> render_labels(const HeartGeometry& g, std::size_t size) {
    std::vector<std::uint8_t> lbl(size * size, 0);
    double lax, lay, aax, aay;
    detail::structure_offsets(g, lax, lay, aax, aay);
    const double ca = std::cos(g.angle), sa = std::sin(g.angle);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            // Pixel in the heart frame.
            const double dx = (static_cast<double>(x) - g.cx) / g.scale;
            const double dy = (static_cast<double>(y) - g.cy) / g.scale;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            std::uint8_t c = 0;
            const double la_u = (u - lax) / g.la_a, la_v = (v - lay) / g.la_b;
            if (la_u * la_u + la_v * la_v <= 1.0) c = kLAC;
            if (std::hypot(u - aax, v - aay) <= g.aa_r) c = kAA;
            const double r = std::hypot(u, v);
            if (r <= g.lv_r + g.myo_t) c = kMYO;
            if (r <= g.lv_r) c = kLVC;
            lbl[y * size + x] = c;
        }
    return lbl;
}

// Unnormalised intensities for a label map under a domain profile.
inline std::vector<float> render_raw(const std::vector<std::uint8_t>& labels, std::size_t size,
                                     const IntensityProfile& p, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double bx = p.bias * u(rng), by = p.bias * u(rng);
    std::vector<float> img(labels.size());
    const double half = 0.5 * static_cast<double>(size - 1);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t i = y * size + x;
            const double field = half > 0 ? (bx * (x - half) + by * (y - half)) / half : 0.0;
            img[i] = static_cast<float>(p.mean.at(labels[i]) + field + p.noise * noise(rng));
        }
    return img;
}

// Per-image z-score followed by a min-max rescale to [-1,1]. Constant
// images map to zeros.
template <class F>
std::vector<F> preprocess(std::span<const F> raw) {
    std::vector<F> out(raw.size(), F(0));
    if (raw.empty()) return out;
    double mean = 0;
    for (F v : raw) mean += v;
    mean /= static_cast<double>(raw.size());
    double var = 0;
    for (F v : raw) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(raw.size()));
    if (!(sd > 0)) return out;
    std::vector<double> z(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) z[i] = (raw[i] - mean) / sd;
    const auto [lo, hi] = std::minmax_element(z.begin(), z.end());
    const double zmin = *lo, zmax = *hi;
    if (!(zmax > zmin)) return out;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = static_cast<F>(2.0 * (z[i] - zmin) / (zmax - zmin) - 1.0);
    }
    // Pin the extremes exactly.
    out[lo - z.begin()] = F(-1);
    out[hi - z.begin()] = F(1);
    return out;
}

template <class F>
std::vector<F> preprocess(const std::vector<F>& raw) {
    return preprocess(std::span<const F>(raw));
}

struct SynthDataset {
    SynthConfig config;
    std::vector<DomainSample> source;
    std::vector<DomainSample> target;        // training slices, labels kept only for reference
    std::vector<DomainSample> target_test;   // held-out evaluation slices
};

// Stream ids for per-index RNGs.
enum : std::uint64_t { kStreamSource = 1, kStreamTarget = 2 };

inline DomainSample generate_sample(const SynthConfig& c, Domain d, std::size_t index) {
    auto rng = detail::sample_rng(c.seed, d == Domain::source ? kStreamSource : kStreamTarget, index);
    const HeartGeometry g = sample_geometry(c, rng);
    auto labels = render_labels(g, c.image_size);
    auto raw = render_raw(labels, c.image_size, d == Domain::source ? c.source : c.target, rng);
    DomainSample s;
    s.height = s.width = c.image_size;
    s.image = preprocess(raw);
    s.label = std::move(labels);
    s.domain = d;
    char id[32];
    std::snprintf(id, sizeof(id), "%s_%04zu", d == Domain::source ? "src" : "tgt", index);
    s.id = id;
    return s;
}

// Target test slices continue the target index sequence after the training
// slices, so both come from the same distribution but never overlap.
inline SynthDataset generate_dataset(const SynthConfig& c) {
    validate(c);
    SynthDataset ds;
    ds.config = c;
    for (std::size_t i = 0; i < c.source_count; ++i) ds.source.push_back(generate_sample(c, Domain::source, i));
    for (std::size_t i = 0; i < c.target_count + c.test_count; ++i) {
        auto s = generate_sample(c, Domain::target, i);
        (i < c.target_count ? ds.target : ds.target_test).push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------- augmentation

struct AffineParams {
    double angle = 0;   // radians
    double scale = 1;
    double shear = 0;
};

inline AffineParams random_affine(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    AffineParams a;
    a.angle = (u(rng) * 30.0 - 15.0) * std::numbers::pi / 180.0;
    a.scale = 0.9 + 0.2 * u(rng);
    a.shear = u(rng) * 0.2 - 0.1;
    return a;
}

// Warps about the image centre: image bilinear (outside -> -1), label
// nearest (outside -> background).
inline DomainSample apply_affine(const DomainSample& s, const AffineParams& a) {
    const std::size_t H = s.height, W = s.width;
    // Forward map M = R(angle) * Shear * scale; sample at M^-1 (p - c) + c.
    const double ca = std::cos(a.angle), sa = std::sin(a.angle);
    const double m00 = a.scale * ca, m01 = a.scale * (ca * a.shear - sa);
    const double m10 = a.scale * sa, m11 = a.scale * (sa * a.shear + ca);
    const double det = m00 * m11 - m01 * m10;
    const double i00 = m11 / det, i01 = -m01 / det, i10 = -m10 / det, i11 = m00 / det;
    const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);

    DomainSample out = s;
    auto img_at = [&](long y, long x) -> double {
        if (y < 0 || x < 0 || y >= long(H) || x >= long(W)) return -1.0;
        return s.image[y * W + x];
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double px = static_cast<double>(x) - cx, py = static_cast<double>(y) - cy;
            double sx = i00 * px + i01 * py + cx;
            double sy = i10 * px + i11 * py + cy;
            // Snap rounding noise so the identity warp reproduces the input.
            if (std::abs(sx - std::round(sx)) < 1e-9) sx = std::round(sx);
            if (std::abs(sy - std::round(sy)) < 1e-9) sy = std::round(sy);
            const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            double v;
            if (fx == 0 && fy == 0) {
                v = img_at(y0, x0);
            } else {
                v = (1 - fy) * ((1 - fx) * img_at(y0, x0) + fx * img_at(y0, x0 + 1)) +
                    fy * ((1 - fx) * img_at(y0 + 1, x0) + fx * img_at(y0 + 1, x0 + 1));
            }
            out.image[y * W + x] = static_cast<float>(v);
            if (s.label) {
                const long nx = std::lround(sx), ny = std::lround(sy);
                (*out.label)[y * W + x] =
                    (nx < 0 || ny < 0 || nx >= long(W) || ny >= long(H)) ? 0 : (*s.label)[ny * W + nx];
            }
        }
    return out;
}

inline DomainSample augment(const DomainSample& s, std::mt19937_64& rng) {
    return apply_affine(s, random_affine(rng));
}

// ---------------------------------------------------------------- dataset I/O
//
//   dir/source/img_0000.pseg  f32 (1,H,W)
//   dir/source/lbl_0000.pseg  u8  (H,W)
//   dir/target/...            training slices first, then test slices
//   dir/manifest.txt          "key value" lines

inline void write_sample(const std::filesystem::path& dir, std::size_t index, const DomainSample& s) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.pseg", index);
    write_array<float>(dir / name, Shape{1, s.height, s.width}, s.image);
    if (s.label) {
        std::snprintf(name, sizeof(name), "lbl_%04zu.pseg", index);
        write_array<std::uint8_t>(dir / name, Shape{s.height, s.width}, *s.label);
    }
}

inline DomainSample read_sample(const std::filesystem::path& dir, std::size_t index, Domain d, bool with_label) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.pseg", index);
    auto img = read_array<float>(dir / name);
    if (img.shape.size() != 3 || img.shape[0] != 1) {
        throw FormatError((dir / name).string() + ": expected (1,H,W), got " + shape_str(img.shape));
    }
    DomainSample s;
    s.height = img.shape[1];
    s.width = img.shape[2];
    s.image = std::move(img.values);
    for (float v : s.image)
        if (!(v >= -1.0f && v <= 1.0f)) throw FormatError((dir / name).string() + ": value outside [-1,1]");
    s.domain = d;
    std::snprintf(name, sizeof(name), "%s_%04zu", d == Domain::source ? "src" : "tgt", index);
    s.id = name;
    if (with_label) {
        std::snprintf(name, sizeof(name), "lbl_%04zu.pseg", index);
        auto lbl = read_array<std::uint8_t>(dir / name);
        if (lbl.shape != Shape{s.height, s.width}) {
            throw FormatError((dir / name).string() + ": label shape " + shape_str(lbl.shape) +
                              " does not match image");
        }
        s.label = std::move(lbl.values);
    }
    return s;
}

inline std::string profile_str(const IntensityProfile& p) {
    std::ostringstream os;
    for (std::size_t i = 0; i < p.mean.size(); ++i) os << (i ? "," : "") << p.mean[i];
    os << " noise " << p.noise << " bias " << p.bias;
    return os.str();
}

inline void write_dataset(const std::filesystem::path& dir, const SynthDataset& ds,
                          const std::string& config_echo = "") {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "source");
    fs::create_directories(dir / "target");
    for (std::size_t i = 0; i < ds.source.size(); ++i) write_sample(dir / "source", i, ds.source[i]);
    std::size_t t = 0;
    for (const auto& s : ds.target) write_sample(dir / "target", t++, s);
    for (const auto& s : ds.target_test) write_sample(dir / "target", t++, s);
    std::ofstream m(dir / "manifest.txt");
    if (!m) throw FormatError((dir / "manifest.txt").string() + ": cannot open for writing");
    const auto& c = ds.config;
    m << "format pseg-dataset 1\n"
      << "image_size " << c.image_size << '\n'
      << "num_classes " << c.num_foreground_classes + 1 << '\n'
      << "source_count " << ds.source.size() << '\n'
      << "target_train_count " << ds.target.size() << '\n'
      << "target_test_count " << ds.target_test.size() << '\n'
      << "seed " << c.seed << '\n'
      << "source_profile " << profile_str(c.source) << '\n'
      << "target_profile " << profile_str(c.target) << '\n';
    if (!config_echo.empty()) {
        std::istringstream is(config_echo);
        for (std::string line; std::getline(is, line);) m << "config " << line << '\n';
    }
}

struct LoadedDataset {
    std::size_t image_size = 0;
    std::size_t num_classes = 0;
    std::vector<DomainSample> source;
    std::vector<DomainSample> target;        // labels dropped
    std::vector<DomainSample> target_test;   // labels kept for evaluation
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw FormatError((dir / "manifest.txt").string() + ": dataset manifest missing");
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(m, line);) {
        const auto sp = line.find(' ');
        if (sp == std::string::npos) continue;
        kv.emplace(line.substr(0, sp), line.substr(sp + 1));
    }
    auto num = [&](const char* key) -> std::size_t {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError((dir / "manifest.txt").string() + ": missing key " + key);
        try {
            return std::stoul(it->second);
        } catch (const std::exception&) {
            throw FormatError((dir / "manifest.txt").string() + ": bad value for " + key);
        }
    };
    LoadedDataset ds;
    ds.image_size = num("image_size");
    ds.num_classes = num("num_classes");
    const std::size_t ns = num("source_count"), nt = num("target_train_count"), ne = num("target_test_count");
    for (std::size_t i = 0; i < ns; ++i) ds.source.push_back(read_sample(dir / "source", i, Domain::source, true));
    for (std::size_t i = 0; i < nt; ++i) ds.target.push_back(read_sample(dir / "target", i, Domain::target, false));
    for (std::size_t i = 0; i < ne; ++i) {
        ds.target_test.push_back(read_sample(dir / "target", nt + i, Domain::target, true));
    }
    for (const auto* group : {&ds.source, &ds.target, &ds.target_test})
        for (const auto& s : *group) {
            if (s.height != ds.image_size || s.width != ds.image_size) {
                throw FormatError(s.id + ": size differs from manifest image_size");
            }
            if (s.label)
                for (auto c : *s.label)
                    if (c >= ds.num_classes) throw FormatError(s.id + ": label class out of range");
        }
    return ds;
}

}  // namespace pseg
