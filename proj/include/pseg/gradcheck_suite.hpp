#pragma once

// Finite-difference suites for every loss, in double precision.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pseg/alignment.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/objectives.hpp"
#include "pseg/proto_dict.hpp"

namespace pseg {

struct GradSuiteResult {
    std::string name;
    std::size_t instances = 0;
    double max_rel_error = 0;
    bool passed = false;
};

struct GradSuiteOptions {
    std::size_t instances = 20;
    double eps = 1e-6;
    double tolerance = 1e-4;
    std::uint64_t seed = 2024;
};

namespace gradsuite {

using Td = Tensor<double>;
using Fn = std::function<Td(const std::vector<Td>&)>;

struct Instance {
    Fn f;
    std::vector<Td> params;
};

inline Td uniform(std::mt19937_64& rng, const Shape& s, const std::string& name, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = u(rng);
    return name.empty() ? Td::constant(s, std::move(v)) : Td::parameter(name, s, std::move(v));
}

// Random labels over `classes` classes with every class present.
inline SupervisionMap random_supervision(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t classes,
                                         double invalid_fraction = 0.0) {
    SupervisionMap s{h, w, std::vector<std::int32_t>(h * w), std::vector<std::uint8_t>(h * w, 1)};
    std::uniform_int_distribution<int> cls(0, static_cast<int>(classes) - 1);
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s.labels[i] = i < classes ? static_cast<std::int32_t>(i) : cls(rng);
        if (i >= classes && u(rng) < invalid_fraction) s.valid[i] = 0;
    }
    return s;
}

inline FeatureDictionary<double> random_dictionary(std::mt19937_64& rng, std::size_t classes, std::size_t depth,
                                                   std::size_t capacity) {
    FeatureDictionary<double> d(classes, depth, capacity);
    std::uniform_real_distribution<double> u(-1, 1);
    std::uniform_int_distribution<std::size_t> fill(1, capacity);
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t n = fill(rng);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(depth);
            for (auto& x : v) x = u(rng);
            d.push(c, v);
        }
    }
    return d;
}

inline Instance make_instance(const std::string& name, std::mt19937_64& rng) {
    const std::size_t D = 4, H = 4, W = 4, C = 3;
    if (name == "L_sc") {
        auto sup = random_supervision(rng, H, W, C, 0.2);
        return {[sup](const std::vector<Td>& p) {
                    return loss_sc(p[0], sup, compute_prototypes(p[0], sup, {0, 1, 2}, 1));
                },
                {uniform(rng, {D, H, W}, "z")}};
    }
    if (name == "L_dc") {
        return {[](const std::vector<Td>& p) {
                    std::vector<Prototype<double>> ps;
                    for (std::size_t i = 0; i < p.size(); ++i) ps.push_back({i + 1, p[i], ProtoDomain::s, 1});
                    return loss_dc(ps);
                },
                {uniform(rng, {D}, "c1"), uniform(rng, {D}, "c2"), uniform(rng, {D}, "c3")}};
    }
    if (name == "L_sim") {
        auto sup = random_supervision(rng, H, W, C);
        return {[sup](const std::vector<Td>& p) {
                    return loss_sim(p[0], sup, compute_prototypes(p[0], sup, {1, 2}, 1, ProtoDomain::t));
                },
                {uniform(rng, {D, H, W}, "z")}};
    }
    if (name.rfind("L_cl", 0) == 0) {
        AggregationStrategy strat{Aggregation::mean_top_k, 3};
        if (name == "L_cl/mean_all") strat.kind = Aggregation::mean_all;
        if (name == "L_cl/max") strat.kind = Aggregation::max_similarity;
        auto dict = random_dictionary(rng, C, D, 6);
        return {[dict, strat](const std::vector<Td>& p) {
                    std::vector<Prototype<double>> q{{1, p[0], ProtoDomain::s, 1}, {2, p[1], ProtoDomain::t2s, 1}};
                    return loss_cl(q, dict, 0.5, strat).loss;
                },
                {uniform(rng, {D}, "q1"), uniform(rng, {D}, "q2")}};
    }
    if (name == "L_seg") {
        std::vector<std::uint8_t> labels(2 * H * W);
        std::uniform_int_distribution<int> cls(0, static_cast<int>(C) - 1);
        for (auto& l : labels) l = static_cast<std::uint8_t>(cls(rng));
        return {[labels](const std::vector<Td>& p) { return loss_seg(p[0], labels); },
                {uniform(rng, {2, C, H, W}, "logits", -2, 2)}};
    }
    if (name == "L_cycle") {
        auto orig = uniform(rng, {1, 1, H, W}, "");
        return {[orig](const std::vector<Td>& p) { return loss_cycle(orig, p[0]); },
                {uniform(rng, {1, 1, H, W}, "recon")}};
    }
    if (name == "LSGAN/discriminator") {
        return {[](const std::vector<Td>& p) {
                    return loss_lsgan(std::optional<Td>(p[0]), p[1], GanSide::discriminator);
                },
                {uniform(rng, {2, 1, 2, 2}, "real"), uniform(rng, {2, 1, 2, 2}, "fake")}};
    }
    if (name == "LSGAN/generator") {
        return {[](const std::vector<Td>& p) { return loss_lsgan(std::optional<Td>{}, p[0], GanSide::generator); },
                {uniform(rng, {2, 1, 2, 2}, "fake")}};
    }
    if (name == "L_all") {
        std::vector<std::uint8_t> labels(H * W);
        std::uniform_int_distribution<int> cls(0, static_cast<int>(C) - 1);
        for (auto& l : labels) l = static_cast<std::uint8_t>(cls(rng));
        auto orig = uniform(rng, {1, 1, H, W}, "");
        auto sup = random_supervision(rng, H, W, C);
        auto dict = random_dictionary(rng, C, D, 6);
        return {[=](const std::vector<Td>& p) {
                    BaseComponents<double> b;
                    b.seg = loss_seg(p[0], labels);
                    b.cycle = loss_cycle(orig, p[1]);
                    b.adv_img = loss_lsgan(std::optional<Td>{}, p[2], GanSide::generator);
                    b.adv_seg = loss_lsgan(std::optional<Td>{}, p[3], GanSide::generator);
                    auto protos = compute_prototypes(p[4], sup, {1, 2}, 1);
                    const Td sim = loss_sim(p[4], sup, protos);
                    const Td cl = loss_cl(protos, dict, 1.0, {Aggregation::mean_top_k, 3}).loss;
                    return loss_all(b, sim, cl, LossWeights{}).all;
                },
                {uniform(rng, {1, C, H, W}, "logits", -2, 2), uniform(rng, {1, 1, H, W}, "recon"),
                 uniform(rng, {1, 1, 2, 2}, "d_img"), uniform(rng, {1, 1, 2, 2}, "d_seg"),
                 uniform(rng, {D, H, W}, "z")}};
    }
    throw std::invalid_argument("unknown gradient suite '" + name + "'");
}

}  // namespace gradsuite

inline const std::vector<std::string>& loss_suite_names() {
    static const std::vector<std::string> names = {"L_sc",      "L_dc",    "L_sim",   "L_cl",
                                                   "L_cl/mean_all", "L_cl/max", "L_seg", "L_cycle",
                                                   "LSGAN/discriminator", "LSGAN/generator", "L_all"};
    return names;
}

inline GradSuiteResult run_grad_suite(const std::string& name, const GradSuiteOptions& opt = {}) {
    std::mt19937_64 rng(opt.seed ^ std::hash<std::string>{}(name));
    GradSuiteResult r{name, opt.instances, 0.0, true};
    for (std::size_t i = 0; i < opt.instances; ++i) {
        auto inst = gradsuite::make_instance(name, rng);
        const FdReport rep = finite_difference_check<double>(inst.f, inst.params, opt.eps);
        r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
    }
    r.passed = r.max_rel_error <= opt.tolerance;
    return r;
}

inline std::vector<GradSuiteResult> run_all_grad_suites(const GradSuiteOptions& opt = {}) {
    std::vector<GradSuiteResult> out;
    for (const auto& n : loss_suite_names()) out.push_back(run_grad_suite(n, opt));
    return out;
}

}  // namespace pseg
