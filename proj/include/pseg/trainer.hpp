#pragma once

// Cycle training loop, averaged inference, evaluation and ablation runs.
//
// Per step, with G_S / G_T the source / target modules:
//   x_s -> G_S -> (x_s->t, y_s, z_s);    x_s->t -> G_T -> (x_s->t->s, y_s->t, z_s->t)
//   x_t -> G_T -> (x_t->s, y_t, z_t);    x_t->s -> G_S -> (x_t->s->t, y_t->s, z_t->s)
// Generators minimise L_all, then the four discriminators take one LSGAN
// step on detached outputs, then c_s / c_s->t are queued into B_s / B_t.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pseg/alignment.hpp"
#include "pseg/data_synth.hpp"
#include "pseg/networks.hpp"
#include "pseg/nn.hpp"
#include "pseg/objectives.hpp"
#include "pseg/proto_dict.hpp"
#include "pseg/report.hpp"

namespace pseg {

struct TrainConfig {
    LossWeights weights;
    SegLossConfig seg_loss;
    AlignmentConfig align;
    std::size_t dict_size = 0;   // 0 = auto
    std::size_t topk = 0;        // 0 = auto
    double tau = 1.0;
    Aggregation aggregation = Aggregation::mean_top_k;
    bool source_queries = true;   // c_s, c_t->s against B_s
    bool target_queries = true;   // c_s->t, c_t against B_t

    std::size_t batch_size = 4;
    std::size_t epochs = 35;
    std::size_t steps_per_epoch = 0;   // 0 = one pass over the source slices
    double lr_g = 3e-4;
    double lr_d = 2e-4;
    double weight_decay = 1e-4;
    std::size_t warmup_epochs = 1;
    std::size_t disc_start_epoch = 0;
    bool augment = true;
    bool instrument = false;
    std::uint64_t seed = 1;

    std::size_t image_size = 32;
    SegArch arch;
    std::size_t disc_width = 16;

    std::size_t eval_every = 1;
    std::size_t max_features = 400;

    std::size_t resolved_dict_size() const { return dict_size ? dict_size : (image_size <= 32 ? 100 : 400); }
    std::size_t resolved_topk() const { return topk ? topk : (image_size <= 32 ? 5 : 20); }
    AggregationStrategy strategy() const { return {aggregation, resolved_topk()}; }
};

inline void validate(const TrainConfig& c) {
    const auto& w = c.weights;
    for (double x : {w.lambda1, w.lambda2, w.seg, w.cycle, w.adv_img, w.adv_seg, c.seg_loss.ce_weight,
                     c.seg_loss.dice_weight, c.lr_g, c.lr_d, c.weight_decay}) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument("train: rates and weights must be >= 0");
    }
    if (c.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (c.warmup_epochs >= c.epochs) throw std::invalid_argument("train: warmup_epochs must be < epochs");
    if (c.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(c.tau > 0.0)) throw std::invalid_argument("train: tau must be > 0");
    if (!(c.align.confidence_threshold > 0.0 && c.align.confidence_threshold <= 1.0)) {
        throw std::invalid_argument("train: confidence threshold must lie in (0,1]");
    }
    if (c.image_size == 0 || c.image_size % kDownsampleFactor != 0) {
        throw std::invalid_argument("train: image_size must be a multiple of " + std::to_string(kDownsampleFactor));
    }
    if (c.image_size % 8 != 0) throw std::invalid_argument("train: discriminators need image_size % 8 == 0");
    if (c.eval_every < 1) throw std::invalid_argument("train: eval every must be >= 1");
}

// One generator/discriminator step. Proposed-loss entries are 0 when their
// weight is 0 and instrumentation is off (they are then not computed).
struct LossRecord {
    std::size_t epoch = 0;   // 0-based
    std::size_t step = 0;    // global, 0-based
    bool warmup = false;
    double lambda1 = 0, lambda2 = 0;   // effective weights this step
    double seg = 0, cycle = 0, adv_img = 0, adv_seg = 0;
    double sim = 0, cl = 0;
    double base = 0, all = 0, disc = 0;
    std::size_t protos_s = 0, protos_s2t = 0, protos_t = 0, protos_t2s = 0;
    std::size_t cl_queries = 0;
    // Instrumentation (NaN when off): |grad L_all - grad L_base| over the
    // generator parameters, and the raw gradient norms of L_sim and L_cl.
    double proposed_grad_norm = std::numeric_limits<double>::quiet_NaN();
    double sim_grad_norm = std::numeric_limits<double>::quiet_NaN();
    double cl_grad_norm = std::numeric_limits<double>::quiet_NaN();

    bool operator==(const LossRecord& o) const {
        auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
        return epoch == o.epoch && step == o.step && warmup == o.warmup && lambda1 == o.lambda1 &&
               lambda2 == o.lambda2 && seg == o.seg && cycle == o.cycle && adv_img == o.adv_img &&
               adv_seg == o.adv_seg && sim == o.sim && cl == o.cl && base == o.base && all == o.all &&
               disc == o.disc && protos_s == o.protos_s && protos_s2t == o.protos_s2t && protos_t == o.protos_t &&
               protos_t2s == o.protos_t2s && cl_queries == o.cl_queries &&
               same(proposed_grad_norm, o.proposed_grad_norm) && same(sim_grad_norm, o.sim_grad_norm) &&
               same(cl_grad_norm, o.cl_grad_norm);
    }
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), 0x70736567u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

template <class T>
struct TrainState {
    TrainConfig config;
    SegModule<T> gs;
    SegModule<T> gt;
    PatchDiscriminator<T> d_img_s;   // real x_s    vs x_t->s
    PatchDiscriminator<T> d_img_t;   // real x_t    vs x_s->t
    PatchDiscriminator<T> d_seg_s;   // real y_s    vs y_t->s
    PatchDiscriminator<T> d_seg_t;   // real y_s->t vs y_t
    AdamState<T> opt_g;
    AdamState<T> opt_d;
    FeatureDictionary<T> dict_s;
    FeatureDictionary<T> dict_t;
    std::size_t epoch = 0;
    std::size_t step = 0;
    std::mt19937_64 rng;
    std::vector<LossRecord> history;

    ParameterSet<T> generator_params() const {
        ParameterSet<T> p = gs.params;
        p.merge(gt.params);
        return p;
    }

    ParameterSet<T> discriminator_params() const {
        ParameterSet<T> p = d_img_s.params;
        p.merge(d_img_t.params);
        p.merge(d_seg_s.params);
        p.merge(d_seg_t.params);
        return p;
    }
};

template <class T>
TrainState<T> make_train_state(const TrainConfig& cfg) {
    validate(cfg);
    const std::uint64_t s = cfg.seed;
    const std::size_t C = cfg.arch.num_classes;
    TrainState<T> st{
        cfg,
        make_seg_module<T>("gs.", Domain::source, cfg.arch, derive_seed(s, 1)),
        make_seg_module<T>("gt.", Domain::target, cfg.arch, derive_seed(s, 2)),
        make_discriminator<T>("dis.", DiscInput::image, cfg.arch.in_channels, derive_seed(s, 3), cfg.disc_width),
        make_discriminator<T>("dit.", DiscInput::image, cfg.arch.in_channels, derive_seed(s, 4), cfg.disc_width),
        make_discriminator<T>("dss.", DiscInput::segmentation, C, derive_seed(s, 5), cfg.disc_width),
        make_discriminator<T>("dst.", DiscInput::segmentation, C, derive_seed(s, 6), cfg.disc_width),
        AdamState<T>{},
        AdamState<T>{},
        FeatureDictionary<T>(C, cfg.arch.embed_depth, cfg.resolved_dict_size()),
        FeatureDictionary<T>(C, cfg.arch.embed_depth, cfg.resolved_dict_size()),
        0,
        0,
        std::mt19937_64(derive_seed(s, 7)),
        {},
    };
    st.opt_g.hyper = AdamHyper{cfg.lr_g, 0.9, 0.999, 1e-8, cfg.weight_decay};
    st.opt_d.hyper = AdamHyper{cfg.lr_d, 0.9, 0.999, 1e-8, cfg.weight_decay};
    return st;
}

// ---------------------------------------------------------------- batches

template <class T>
Tensor<T> image_batch(const std::vector<DomainSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("image_batch: empty batch");
    const std::size_t H = samples[0].height, W = samples[0].width;
    std::vector<T> v;
    v.reserve(samples.size() * H * W);
    for (const auto& s : samples) {
        if (s.height != H || s.width != W) throw ShapeError("image_batch: mixed slice sizes");
        for (float x : s.image) v.push_back(static_cast<T>(x));
    }
    return Tensor<T>::constant(Shape{samples.size(), 1, H, W}, std::move(v));
}

inline std::vector<std::uint8_t> label_batch(const std::vector<DomainSample>& samples) {
    std::vector<std::uint8_t> out;
    for (const auto& s : samples) {
        if (!s.label) throw std::invalid_argument("label_batch: sample " + s.id + " has no label");
        out.insert(out.end(), s.label->begin(), s.label->end());
    }
    return out;
}

namespace detail {

// Values of item n of an (N,C,H,W) tensor as a constant (C,H,W) tensor.
template <class T>
Tensor<T> item_values(const Tensor<T>& x, std::size_t n) {
    const std::size_t per = x.numel() / x.dim(0);
    auto d = x.data().subspan(n * per, per);
    return Tensor<T>::constant(Shape{x.dim(1), x.dim(2), x.dim(3)}, std::vector<T>(d.begin(), d.end()));
}

// Item n of an (N,C,H,W) tensor as (C,H,W), keeping the graph.
template <class T>
Tensor<T> item(const Tensor<T>& x, std::size_t n) {
    return reshape(slice(x, 0, n, n + 1), Shape{x.dim(1), x.dim(2), x.dim(3)});
}

template <class T>
double grad_norm(const ParameterSet<T>& params, const GradientMap<T>& g) {
    double s = 0;
    for (const auto& p : params) {
        auto it = g.find(p.name());
        if (it == g.end()) continue;
        for (T v : it->second) s += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(s);
}

template <class T>
double grad_diff_norm(const ParameterSet<T>& params, const GradientMap<T>& a, const GradientMap<T>& b) {
    double s = 0;
    for (const auto& p : params) {
        auto ia = a.find(p.name());
        auto ib = b.find(p.name());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double va = ia == a.end() ? 0.0 : static_cast<double>(ia->second[i]);
            const double vb = ib == b.end() ? 0.0 : static_cast<double>(ib->second[i]);
            s += (va - vb) * (va - vb);
        }
    }
    return std::sqrt(s);
}

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw DomainError(std::string("train_step: non-finite ") + what + " = " + std::to_string(v));
}

}  // namespace detail

// Prototypes and supervision of every image of one path.
template <class T>
struct PathPrototypes {
    ProtoDomain domain = ProtoDomain::s;
    std::vector<SupervisionMap> supervision;
    std::vector<Tensor<T>> embeddings;             // (D,H,W) per image, with graph
    std::vector<std::vector<Prototype<T>>> protos;  // per image

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : protos) n += p.size();
        return n;
    }

    std::vector<Prototype<T>> flat() const {
        std::vector<Prototype<T>> out;
        for (const auto& p : protos) out.insert(out.end(), p.begin(), p.end());
        return out;
    }
};

// Source-style paths are supervised by the argmax of their own prediction,
// target-style paths by confidence-masked pseudo-labels.
template <class T>
PathPrototypes<T> path_prototypes(const ModuleOutput<T>& out, ProtoDomain domain, const TrainConfig& cfg) {
    PathPrototypes<T> pp;
    pp.domain = domain;
    const bool pseudo = domain == ProtoDomain::t || domain == ProtoDomain::t2s;
    const auto classes = prototype_classes(cfg.arch.num_classes, cfg.align.include_background);
    for (std::size_t n = 0; n < out.probs.dim(0); ++n) {
        const Tensor<T> probs = detail::item_values(out.probs, n);
        pp.supervision.push_back(pseudo ? confidence_mask(probs, cfg.align.confidence_threshold)
                                        : argmax_supervision(probs));
        pp.embeddings.push_back(detail::item(out.embedding, n));
        pp.protos.push_back(
            compute_prototypes(pp.embeddings.back(), pp.supervision.back(), classes, cfg.align.min_pixels, domain));
    }
    return pp;
}

template <class T>
struct CycleOutputs {
    ModuleOutput<T> s, s2t, t, t2s;
};

template <class T>
CycleOutputs<T> cycle_forward(const SegModule<T>& gs, const SegModule<T>& gt, const Tensor<T>& xs,
                              const Tensor<T>& xt) {
    CycleOutputs<T> c;
    c.s = forward_module(gs, xs);
    c.s2t = forward_module(gt, c.s.translated);
    c.t = forward_module(gt, xt);
    c.t2s = forward_module(gs, c.t.translated);
    return c;
}

// Only source-image prototypes may enter the dictionaries.
template <class T>
void push_source_prototypes(FeatureDictionary<T>& dict, const std::vector<Prototype<T>>& protos, ProtoDomain allowed) {
    for (const auto& p : protos) {
        if (p.domain != allowed || (allowed != ProtoDomain::s && allowed != ProtoDomain::s2t)) {
            throw std::logic_error(std::string("dictionary purity: refusing prototype tagged ") +
                                   proto_domain_name(p.domain));
        }
        dict_push(dict, p);
    }
}

template <class T>
LossRecord train_step(TrainState<T>& st, const Tensor<T>& xs, const std::vector<std::uint8_t>& ys,
                      const Tensor<T>& xt) {
    const TrainConfig& cfg = st.config;
    if (xs.rank() != 4 || xt.rank() != 4 || xs.dim(1) != 1 || xt.dim(1) != 1 || xs.dim(2) != xt.dim(2) ||
        xs.dim(3) != xt.dim(3)) {
        throw ShapeError("train_step: batches " + shape_str(xs.shape()) + " and " + shape_str(xt.shape()) +
                         " are inconsistent");
    }
    LossRecord rec;
    rec.epoch = st.epoch;
    rec.step = st.step;
    rec.warmup = st.epoch < cfg.warmup_epochs;
    LossWeights w = cfg.weights;
    if (rec.warmup) w.lambda1 = w.lambda2 = 0.0;
    rec.lambda1 = w.lambda1;
    rec.lambda2 = w.lambda2;

    // (1) both cycles
    const CycleOutputs<T> o = cycle_forward(st.gs, st.gt, xs, xt);

    // (2) prototypes
    const bool need_sim = w.lambda1 != 0.0 || cfg.instrument;
    const bool need_cl = w.lambda2 != 0.0 || cfg.instrument;
    const bool need_target = need_sim || need_cl;
    const PathPrototypes<T> ps = path_prototypes(o.s, ProtoDomain::s, cfg);
    const PathPrototypes<T> ps2t = path_prototypes(o.s2t, ProtoDomain::s2t, cfg);
    PathPrototypes<T> pt, pt2s;
    if (need_target) {
        pt = path_prototypes(o.t, ProtoDomain::t, cfg);
        pt2s = path_prototypes(o.t2s, ProtoDomain::t2s, cfg);
    }
    rec.protos_s = ps.count();
    rec.protos_s2t = ps2t.count();
    rec.protos_t = pt.count();
    rec.protos_t2s = pt2s.count();

    // (3) losses
    BaseComponents<T> base;
    base.seg = add(loss_seg(o.s.logits, ys, cfg.seg_loss), loss_seg(o.s2t.logits, ys, cfg.seg_loss));
    base.cycle = add(loss_cycle(xs, o.s2t.translated), loss_cycle(xt, o.t2s.translated));
    const std::optional<Tensor<T>> none;
    base.adv_img = add(loss_lsgan(none, discriminate(st.d_img_t, o.s.translated), GanSide::generator),
                       loss_lsgan(none, discriminate(st.d_img_s, o.t.translated), GanSide::generator));
    base.adv_seg = add(loss_lsgan(none, discriminate(st.d_seg_s, o.t2s.probs), GanSide::generator),
                       loss_lsgan(none, discriminate(st.d_seg_t, o.t.probs), GanSide::generator));

    Tensor<T> l_sim = Tensor<T>::scalar(T(0));
    if (need_sim) {
        std::vector<Tensor<T>> terms;
        for (const PathPrototypes<T>* pp : {&ps, &ps2t, static_cast<const PathPrototypes<T>*>(&pt), static_cast<const PathPrototypes<T>*>(&pt2s)})
            for (std::size_t n = 0; n < pp->protos.size(); ++n) {
                if (pp->protos[n].empty()) continue;
                terms.push_back(reshape(loss_sim(pp->embeddings[n], pp->supervision[n], pp->protos[n]), Shape{1}));
            }
        if (!terms.empty()) l_sim = mean(concat(terms, 0));
    }
    Tensor<T> l_cl = Tensor<T>::scalar(T(0));
    if (need_cl) {
        std::vector<Tensor<T>> terms;
        auto contrast = [&](const PathPrototypes<T>& pp, const FeatureDictionary<T>& dict) {
            auto r = loss_cl(pp.flat(), dict, cfg.tau, cfg.strategy());
            if (!r.active) return;
            rec.cl_queries += r.contributing;
            terms.push_back(reshape(r.loss, Shape{1}));
        };
        if (cfg.source_queries) {
            contrast(ps, st.dict_s);
            contrast(pt2s, st.dict_s);
        }
        if (cfg.target_queries) {
            contrast(ps2t, st.dict_t);
            contrast(pt, st.dict_t);
        }
        if (!terms.empty()) l_cl = mean(concat(terms, 0));
    }

    const TotalLoss<T> total = loss_all(base, l_sim, l_cl, w);
    rec.seg = base.seg.item();
    rec.cycle = base.cycle.item();
    rec.adv_img = base.adv_img.item();
    rec.adv_seg = base.adv_seg.item();
    rec.sim = l_sim.item();
    rec.cl = l_cl.item();
    rec.base = total.base.item();
    rec.all = total.all.item();

    // (4) generators
    const ParameterSet<T> gen = st.generator_params();
    if (cfg.instrument) {
        rec.sim_grad_norm = l_sim.requires_grad() ? detail::grad_norm(gen, backward(l_sim)) : 0.0;
        rec.cl_grad_norm = l_cl.requires_grad() ? detail::grad_norm(gen, backward(l_cl)) : 0.0;
    }
    GradientMap<T> g_base;
    if (cfg.instrument) g_base = backward(total.base);
    const GradientMap<T> g_all = backward(total.all);
    if (cfg.instrument) rec.proposed_grad_norm = detail::grad_diff_norm(gen, g_all, g_base);
    auto upd_g = adam_step(gen, complete_gradients(gen, g_all), st.opt_g);

    // (5) discriminators on detached generator outputs
    if (st.epoch >= cfg.disc_start_epoch) {
        auto d_loss = [](const PatchDiscriminator<T>& d, const Tensor<T>& real, const Tensor<T>& fake) {
            return loss_lsgan(std::optional<Tensor<T>>(discriminate(d, real.detach())), discriminate(d, fake.detach()),
                              GanSide::discriminator);
        };
        const Tensor<T> ld = add(add(d_loss(st.d_img_t, xt, o.s.translated), d_loss(st.d_img_s, xs, o.t.translated)),
                                 add(d_loss(st.d_seg_s, o.s.probs, o.t2s.probs), d_loss(st.d_seg_t, o.s2t.probs, o.t.probs)));
        rec.disc = ld.item();
        detail::check_finite(rec.disc, "discriminator loss");
        const ParameterSet<T> dp = st.discriminator_params();
        auto upd_d = adam_step(dp, complete_gradients(dp, backward(ld)), st.opt_d);
        st.d_img_s.params = upd_d.params.subset(st.d_img_s.prefix);
        st.d_img_t.params = upd_d.params.subset(st.d_img_t.prefix);
        st.d_seg_s.params = upd_d.params.subset(st.d_seg_s.prefix);
        st.d_seg_t.params = upd_d.params.subset(st.d_seg_t.prefix);
        st.opt_d = std::move(upd_d.state);
    }
    st.gs.params = upd_g.params.subset(st.gs.prefix);
    st.gt.params = upd_g.params.subset(st.gt.prefix);
    st.opt_g = std::move(upd_g.state);

    // (6) queue this step's source prototypes
    push_source_prototypes(st.dict_s, ps.flat(), ProtoDomain::s);
    push_source_prototypes(st.dict_t, ps2t.flat(), ProtoDomain::s2t);

    ++st.step;
    st.history.push_back(rec);
    return rec;
}

// ---------------------------------------------------------------- inference

// Elementwise mean of two probability maps.
template <class T>
Tensor<T> average_probabilities(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("average_probabilities: shapes differ");
    return scale(add(a, b), T(0.5));
}

inline std::vector<std::uint8_t> argmax_channels(std::span<const double> v, const Shape& shape) {
    const std::size_t N = shape[0], C = shape[1], P = shape[2] * shape[3];
    std::vector<std::uint8_t> out(N * P);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (v[(n * C + c) * P + p] > v[(n * C + best) * P + p]) best = c;
            out[n * P + p] = static_cast<std::uint8_t>(best);
        }
    return out;
}

template <class T>
struct Inference {
    Tensor<T> probs;                  // (N,C,H,W)
    std::vector<std::uint8_t> labels;  // (N,H,W)
    Tensor<T> embedding;              // z_t, (N,D,H,W)
};

// Averages softmax(y_t) from G_T and softmax(y_t->s) from G_S.
template <class T>
Inference<T> infer(const SegModule<T>& gs, const SegModule<T>& gt, const Tensor<T>& xt) {
    const ModuleOutput<T> t = forward_module(gt, xt);
    const ModuleOutput<T> t2s = forward_module(gs, t.translated);
    Inference<T> r;
    r.probs = average_probabilities(t.probs, t2s.probs);
    std::vector<double> v(r.probs.data().begin(), r.probs.data().end());
    r.labels = argmax_channels(v, r.probs.shape());
    r.embedding = t.embedding;
    return r;
}

template <class T>
SegModule<T> frozen(const SegModule<T>& m) {
    SegModule<T> f = m;
    f.params = frozen(m.params);
    return f;
}

template <class T>
Inference<T> infer(const TrainState<T>& st, const Tensor<T>& xt) {
    return infer(frozen(st.gs), frozen(st.gt), xt);
}

template <class T>
struct Evaluation {
    std::vector<SampleMetrics> samples;
    FeatureSet features;   // target prototypes under the predicted labels
};

template <class T>
Evaluation<T> evaluate(const SegModule<T>& gs, const SegModule<T>& gt, const std::vector<DomainSample>& test,
                       std::size_t epoch, const TrainConfig& cfg, std::size_t batch = 10) {
    const SegModule<T> fs = frozen(gs), ft = frozen(gt);
    Evaluation<T> ev;
    const auto classes = prototype_classes(cfg.arch.num_classes, false);
    for (std::size_t b = 0; b < test.size(); b += batch) {
        std::vector<DomainSample> chunk(test.begin() + b, test.begin() + std::min(test.size(), b + batch));
        const Inference<T> r = infer(fs, ft, image_batch<T>(chunk));
        const std::size_t H = chunk[0].height, W = chunk[0].width, P = H * W;
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            if (!chunk[n].label) throw std::invalid_argument("evaluate: test slice " + chunk[n].id + " has no label");
            std::span<const std::uint8_t> pred(r.labels.data() + n * P, P);
            ev.samples.push_back({epoch, "target_test", evaluate_labels(pred, *chunk[n].label, H, W, cfg.arch.num_classes)});
            SupervisionMap sup{H, W, std::vector<std::int32_t>(pred.begin(), pred.end()), std::vector<std::uint8_t>(P, 1)};
            for (const auto& p : compute_prototypes(detail::item_values(r.embedding, n), sup, classes,
                                                    cfg.align.min_pixels, ProtoDomain::t)) {
                ev.features.vectors.emplace_back(p.vector.data().begin(), p.vector.data().end());
                ev.features.labels.push_back(p.class_id);
                ev.features.tags.push_back("t");
            }
        }
    }
    return ev;
}

// Mean foreground Dice / ASD of the last evaluated epoch ("avg" rows).
struct FinalScore {
    std::optional<double> dice;
    std::optional<double> asd;
};

inline FinalScore final_score(const std::vector<MetricRow>& rows) {
    FinalScore s;
    std::size_t last = 0;
    for (const auto& r : rows) last = std::max(last, r.epoch);
    for (const auto& r : rows)
        if (r.epoch == last && r.cls == "avg" && r.split == "target_test") {
            s.dice = r.dice;
            s.asd = r.asd;
        }
    return s;
}

// ---------------------------------------------------------------- training

inline std::string history_csv(const std::vector<LossRecord>& h) {
    std::ostringstream os;
    os << "epoch,step,warmup,lambda1,lambda2,seg,cycle,adv_img,adv_seg,sim,cl,base,all,disc,"
          "protos_s,protos_s2t,protos_t,protos_t2s,cl_queries,proposed_grad_norm,sim_grad_norm,cl_grad_norm\n";
    auto num = [](double v) { return std::isnan(v) ? std::string() : detail::format_double(v); };
    for (const auto& r : h) {
        os << r.epoch << ',' << r.step << ',' << (r.warmup ? 1 : 0) << ',' << num(r.lambda1) << ',' << num(r.lambda2)
           << ',' << num(r.seg) << ',' << num(r.cycle) << ',' << num(r.adv_img) << ',' << num(r.adv_seg) << ','
           << num(r.sim) << ',' << num(r.cl) << ',' << num(r.base) << ',' << num(r.all) << ',' << num(r.disc) << ','
           << r.protos_s << ',' << r.protos_s2t << ',' << r.protos_t << ',' << r.protos_t2s << ',' << r.cl_queries
           << ',' << num(r.proposed_grad_norm) << ',' << num(r.sim_grad_norm) << ',' << num(r.cl_grad_norm) << '\n';
    }
    return os.str();
}

inline std::vector<LossCurve> epoch_loss_curves(const std::vector<LossRecord>& h) {
    std::vector<LossCurve> curves = {{"seg", {}}, {"cycle", {}}, {"adv_img", {}}, {"adv_seg", {}},
                                     {"sim", {}}, {"cl", {}},    {"all", {}},     {"disc", {}}};
    std::size_t i = 0;
    while (i < h.size()) {
        std::size_t j = i;
        std::vector<double> acc(curves.size(), 0.0);
        for (; j < h.size() && h[j].epoch == h[i].epoch; ++j) {
            const double v[] = {h[j].seg, h[j].cycle, h[j].adv_img, h[j].adv_seg, h[j].sim, h[j].cl, h[j].all, h[j].disc};
            for (std::size_t k = 0; k < curves.size(); ++k) acc[k] += v[k];
        }
        for (std::size_t k = 0; k < curves.size(); ++k) curves[k].values.push_back(acc[k] / static_cast<double>(j - i));
        i = j;
    }
    return curves;
}

template <class T>
void save_train_state(const std::filesystem::path& dir, const TrainState<T>& st, const std::string& config_echo) {
    ParameterSet<T> all = st.generator_params();
    all.merge(st.discriminator_params());
    save_checkpoint(dir / "params", all);
    dump_dictionary(st.dict_s, dir / "dict_s");
    dump_dictionary(st.dict_t, dir / "dict_t");
    write_text(dir / "config.txt", config_echo);
    std::ostringstream meta;
    meta << "epoch " << st.epoch << "\nstep " << st.step << '\n';
    write_text(dir / "state.txt", meta.str());
}

// Loads the generator modules of a checkpoint into a fresh state built from
// `cfg` (discriminators and dictionaries are not needed for inference).
template <class T>
TrainState<T> load_generators(const std::filesystem::path& dir, const TrainConfig& cfg) {
    TrainState<T> st = make_train_state<T>(cfg);
    const ParameterSet<T> all = load_checkpoint<T>(dir / "params");
    for (auto* m : {&st.gs, &st.gt}) {
        ParameterSet<T> loaded = all.subset(m->prefix);
        for (const auto& p : m->params) {
            if (!loaded.contains(p.name()) || loaded.at(p.name()).shape() != p.shape()) {
                throw FormatError(dir.string() + ": checkpoint does not match the configured model at '" + p.name() + "'");
            }
        }
        if (loaded.size() != m->params.size()) throw FormatError(dir.string() + ": checkpoint has extra parameters");
        m->params = std::move(loaded);
    }
    return st;
}

template <class T>
struct TrainResult {
    TrainState<T> state;
    std::vector<SampleMetrics> samples;
    std::vector<MetricRow> rows;
    FeatureSet features;
};

inline FeatureSet dictionary_features(const auto& dict, const std::string& tag) {
    FeatureSet f;
    for (std::size_t c = 0; c < dict.num_classes(); ++c)
        for (const auto& e : dict.entries(c)) {
            f.vectors.emplace_back(e.begin(), e.end());
            f.labels.push_back(c);
            f.tags.push_back(tag);
        }
    return f;
}

// Keeps at most `cap` vectors, evenly strided.
inline FeatureSet cap_features(const FeatureSet& f, std::size_t cap) {
    if (f.vectors.size() <= cap || cap == 0) return f;
    FeatureSet out;
    for (std::size_t i = 0; i < cap; ++i) {
        const std::size_t j = i * f.vectors.size() / cap;
        out.vectors.push_back(f.vectors[j]);
        out.labels.push_back(f.labels[j]);
        out.tags.push_back(f.tags[j]);
    }
    return out;
}

// Runs all epochs. With a non-empty out_dir, writes metrics.csv, losses.svg,
// features.svg, history.csv, config.txt and checkpoint/.
template <class T>
TrainResult<T> train(const TrainConfig& cfg, const LoadedDataset& data, const std::filesystem::path& out_dir = {},
                     const std::string& config_echo = "", std::ostream* log = nullptr) {
    validate(cfg);
    if (data.source.empty() || data.target.empty() || data.target_test.empty()) {
        throw std::invalid_argument("train: dataset needs source, target and target test slices");
    }
    if (data.image_size != cfg.image_size) {
        throw std::invalid_argument("train: dataset image_size " + std::to_string(data.image_size) +
                                    " differs from configured " + std::to_string(cfg.image_size));
    }
    if (data.num_classes != cfg.arch.num_classes) {
        throw std::invalid_argument("train: dataset has " + std::to_string(data.num_classes) + " classes, model " +
                                    std::to_string(cfg.arch.num_classes));
    }
    TrainResult<T> res{make_train_state<T>(cfg), {}, {}, {}};
    TrainState<T>& st = res.state;
    const std::size_t B = cfg.batch_size;
    const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : (data.source.size() + B - 1) / B;
    std::vector<std::size_t> src(data.source.size()), tgt(data.target.size());
    FeatureSet last_target_features;

    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        st.epoch = e;
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(src.begin(), src.end(), std::size_t{0});
        std::iota(tgt.begin(), tgt.end(), std::size_t{0});
        std::shuffle(src.begin(), src.end(), st.rng);
        std::shuffle(tgt.begin(), tgt.end(), st.rng);
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<DomainSample> sb, tb;
            for (std::size_t j = 0; j < B; ++j) {
                const auto& a = data.source[src[(s * B + j) % src.size()]];
                const auto& b = data.target[tgt[(s * B + j) % tgt.size()]];
                sb.push_back(cfg.augment ? augment(a, st.rng) : a);
                tb.push_back(cfg.augment ? augment(b, st.rng) : b);
            }
            train_step(st, image_batch<T>(sb), label_batch(sb), image_batch<T>(tb));
        }
        const bool eval_now = (e + 1) % cfg.eval_every == 0 || e + 1 == cfg.epochs;
        if (eval_now) {
            auto ev = evaluate(st.gs, st.gt, data.target_test, e + 1, cfg);
            res.samples.insert(res.samples.end(), ev.samples.begin(), ev.samples.end());
            last_target_features = std::move(ev.features);
        }
        if (log) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            const auto curves = epoch_loss_curves(st.history);
            *log << "epoch " << e + 1 << '/' << cfg.epochs << std::fixed << std::setprecision(4)
                 << " seg " << curves[0].values.back() << " cycle " << curves[1].values.back() << " sim "
                 << curves[4].values.back() << " cl " << curves[5].values.back();
            if (eval_now) {
                const auto score = final_score(summarize(res.samples));
                *log << " dice " << (score.dice ? *score.dice : std::nan(""));
            }
            *log << std::setprecision(1) << " (" << secs << " s)" << std::defaultfloat << std::endl;
        }
    }
    res.rows = summarize(res.samples);

    // Projection input: both dictionaries plus target test prototypes.
    FeatureSet f = dictionary_features(st.dict_s, "s");
    const FeatureSet ft = dictionary_features(st.dict_t, "s->t");
    const std::size_t cap = cfg.max_features / 3 + 1;
    f = cap_features(f, cap);
    for (const FeatureSet* part : {&ft, static_cast<const FeatureSet*>(&last_target_features)}) {
        const FeatureSet c = cap_features(*part, cap);
        f.vectors.insert(f.vectors.end(), c.vectors.begin(), c.vectors.end());
        f.labels.insert(f.labels.end(), c.labels.begin(), c.labels.end());
        f.tags.insert(f.tags.end(), c.tags.begin(), c.tags.end());
    }
    res.features = std::move(f);

    if (!out_dir.empty()) {
        emit_report(res.samples, epoch_loss_curves(st.history), res.features, out_dir);
        write_text(out_dir / "history.csv", history_csv(st.history));
        write_text(out_dir / "config.txt", config_echo);
        save_train_state(out_dir / "checkpoint", st, config_echo);
    }
    return res;
}

// ---------------------------------------------------------------- ablation

struct AblationCell {
    std::string setting;
    TrainConfig config;
};

enum class AblationGrid { loss, aggregation, dict_size };

inline AblationGrid parse_grid(const std::string& s) {
    if (s == "loss") return AblationGrid::loss;
    if (s == "aggregation") return AblationGrid::aggregation;
    if (s == "dict_size") return AblationGrid::dict_size;
    throw std::invalid_argument("unknown ablation grid '" + s + "'");
}

// loss:        (0,0), (lambda1,0), (lambda1,lambda2)
// aggregation: max_similarity, mean_all, mean_top_k
// dict_size:   one row per size
inline std::vector<AblationCell> ablation_cells(AblationGrid grid, const TrainConfig& base, double lambda1,
                                                double lambda2, const std::vector<std::size_t>& sizes = {}) {
    std::vector<AblationCell> cells;
    auto with = [&](std::string name, auto&& edit) {
        TrainConfig c = base;
        edit(c);
        cells.push_back({std::move(name), c});
    };
    switch (grid) {
        case AblationGrid::loss:
            with("base", [&](TrainConfig& c) { c.weights.lambda1 = 0; c.weights.lambda2 = 0; });
            with("base+sim", [&](TrainConfig& c) { c.weights.lambda1 = lambda1; c.weights.lambda2 = 0; });
            with("base+sim+cl", [&](TrainConfig& c) { c.weights.lambda1 = lambda1; c.weights.lambda2 = lambda2; });
            break;
        case AblationGrid::aggregation:
            for (Aggregation a : {Aggregation::max_similarity, Aggregation::mean_all, Aggregation::mean_top_k}) {
                with(aggregation_name(a), [&](TrainConfig& c) {
                    c.aggregation = a;
                    c.weights.lambda1 = lambda1;
                    c.weights.lambda2 = lambda2;
                });
            }
            break;
        case AblationGrid::dict_size:
            if (sizes.empty()) throw std::invalid_argument("ablate: dict_size grid needs sizes");
            for (std::size_t s : sizes) {
                if (s == 0) throw std::invalid_argument("ablate: dictionary size must be >= 1");
                with("S=" + std::to_string(s), [&](TrainConfig& c) {
                    c.dict_size = s;
                    c.weights.lambda1 = lambda1;
                    c.weights.lambda2 = lambda2;
                });
            }
            break;
    }
    return cells;
}

struct AblationRow {
    std::string setting;
    std::vector<std::uint64_t> seeds;
    std::vector<std::optional<double>> dice;   // per seed
    std::vector<std::optional<double>> asd;    // per seed
    std::optional<double> mean_dice;
    std::optional<double> mean_asd;
    std::size_t rank = 0;   // 1 = highest mean Dice
};

inline void rank_rows(std::vector<AblationRow>& rows) {
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto key = [&](std::size_t i) { return rows[i].mean_dice ? *rows[i].mean_dice : -1.0; };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
    for (std::size_t r = 0; r < order.size(); ++r) rows[order[r]].rank = r + 1;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "setting,mean_dice,mean_asd,rank,seeds,dice_per_seed,asd_per_seed\n";
    auto cell = [](const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string(); };
    auto join = [&](const auto& v, auto fmt) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + fmt(v[i]);
        return s;
    };
    for (const auto& r : rows) {
        os << r.setting << ',' << cell(r.mean_dice) << ',' << cell(r.mean_asd) << ',' << r.rank << ','
           << join(r.seeds, [](std::uint64_t s) { return std::to_string(s); }) << ',' << join(r.dice, cell) << ','
           << join(r.asd, cell) << '\n';
    }
    return os.str();
}

// One training per (cell, seed); each row averages its seeds.
template <class T>
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells, const std::vector<std::uint64_t>& seeds,
                                      const LoadedDataset& data, const std::filesystem::path& out_dir = {},
                                      std::ostream* log = nullptr) {
    if (seeds.empty()) throw std::invalid_argument("ablate: no seeds");
    std::vector<AblationRow> rows;
    for (const auto& cell : cells) {
        AblationRow row;
        row.setting = cell.setting;
        std::vector<std::optional<double>> d, a;
        for (std::uint64_t seed : seeds) {
            TrainConfig c = cell.config;
            c.seed = seed;
            if (log) *log << "ablate " << cell.setting << " seed " << seed << std::endl;
            const auto r = train<T>(c, data, {}, "", log);
            const auto score = final_score(r.rows);
            row.seeds.push_back(seed);
            row.dice.push_back(score.dice);
            row.asd.push_back(score.asd);
        }
        row.mean_dice = detail::mean_defined(row.dice);
        row.mean_asd = detail::mean_defined(row.asd);
        rows.push_back(std::move(row));
    }
    rank_rows(rows);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_text(out_dir / "ablation.csv", ablation_csv(rows));
    }
    return rows;
}

}  // namespace pseg
