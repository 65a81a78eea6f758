#pragma once

// Segmentation/translation modules and patch discriminators.
//
// A SegModule is one shared encoder feeding three branches:
//   seg head      -> class logits
//   proj head     -> per-pixel embedding (same layers as the seg head, only
//                    the output channel count differs)
//   translator    -> image in the other domain's style, U-Net style skip
//                    connections from every encoder stage that feeds a
//                    downsampling step
//
//   x ─ enc1 ─ enc2(s2) ─ enc3(s2) ─┬─ head ─ logits
//        │       │                  ├─ head ─ embedding
//        │       └────────┐         │
//        └───────────┐    └─ up ++ ─┴─ tr1 ─ up ++ ─ tr2 ─ tr3 ─ tanh
//                    └────────────────────────┘

#include <sstream>
#include <string>
#include <vector>

#include "pseg/nn.hpp"
#include "pseg/ops.hpp"

namespace pseg {

enum class Activation { none, relu, leaky_relu, tanh };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

struct ConvLayerSpec {
    std::string name;
    std::size_t in = 1;
    std::size_t out = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;
    std::size_t upsample = 1;   // nearest upsampling applied to the input first
    Activation act = Activation::relu;

    bool operator==(const ConvLayerSpec&) const = default;
};

inline std::string serialize(const ConvLayerSpec& l) {
    std::ostringstream os;
    os << l.name << ' ' << l.in << "->" << l.out << " k" << l.kernel << " s" << l.stride << " p" << l.pad
       << " up" << l.upsample << ' ' << activation_name(l.act);
    return os.str();
}

inline std::vector<std::string> serialize(const std::vector<ConvLayerSpec>& ls) {
    std::vector<std::string> out;
    for (const auto& l : ls) out.push_back(serialize(l));
    return out;
}

struct SegArch {
    std::size_t in_channels = 1;
    std::size_t num_classes = 5;   // background + foreground classes
    std::size_t embed_depth = 16;
    std::size_t width = 16;        // channels of the first encoder stage
    std::size_t head_width = 32;
};

struct SegModuleLayout {
    std::vector<ConvLayerSpec> encoder;
    std::vector<ConvLayerSpec> seg_head;
    std::vector<ConvLayerSpec> proj_head;
    std::vector<ConvLayerSpec> translator;
};

inline constexpr std::size_t kDownsampleFactor = 4;

// Both heads come from this one function so they can only differ in `out`.
inline std::vector<ConvLayerSpec> head_layers(std::size_t in, std::size_t mid, std::size_t out) {
    return {
        {"h1", in, mid, 3, 1, 1, 2, Activation::relu},
        {"h2", mid, out, 3, 1, 1, 2, Activation::none},
    };
}

inline SegModuleLayout make_seg_layout(const SegArch& a) {
    const std::size_t c1 = a.width, c2 = 2 * a.width, c3 = 4 * a.width;
    SegModuleLayout l;
    l.encoder = {
        {"enc1", a.in_channels, c1, 3, 1, 1, 1, Activation::relu},
        {"enc2", c1, c2, 3, 2, 1, 1, Activation::relu},
        {"enc3", c2, c3, 3, 2, 1, 1, Activation::relu},
    };
    l.seg_head = head_layers(c3, a.head_width, a.num_classes);
    l.proj_head = head_layers(c3, a.head_width, a.embed_depth);
    l.translator = {
        {"tr1", c3 + c2, c2, 3, 1, 1, 1, Activation::relu},
        {"tr2", c2 + c1, c1, 3, 1, 1, 1, Activation::relu},
        {"tr3", c1, a.in_channels, 3, 1, 1, 1, Activation::tanh},
    };
    return l;
}

inline void append_layout(LayoutSpec& spec, const std::string& prefix,
                          const std::vector<ConvLayerSpec>& layers) {
    for (const auto& l : layers) {
        spec.push_back({prefix + l.name + ".weight", {l.out, l.in, l.kernel, l.kernel},
                        l.in * l.kernel * l.kernel, false});
        spec.push_back({prefix + l.name + ".bias", {l.out}, l.in * l.kernel * l.kernel, true});
    }
}

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

template <class T>
Tensor<T> apply_layer(const ConvLayerSpec& l, const ParameterSet<T>& ps, const std::string& prefix,
                      Tensor<T> x) {
    if (l.upsample > 1) x = upsample_nearest(x, l.upsample);
    Tensor<T> y = conv2d(x, ps.at(prefix + l.name + ".weight"), ps.at(prefix + l.name + ".bias"),
                         Conv2dAttrs{l.stride, l.pad});
    switch (l.act) {
        case Activation::none: return y;
        case Activation::relu: return relu(y);
        case Activation::leaky_relu: return leaky_relu(y, T(0.2));
        case Activation::tanh: return pseg::tanh(y);
    }
    return y;
}

template <class T>
struct SegModule {
    std::string prefix;      // parameter id prefix, e.g. "gs."
    Domain domain = Domain::source;
    SegArch arch;
    SegModuleLayout layout;
    ParameterSet<T> params;

    LayoutSpec layout_spec() const { return seg_layout_spec(prefix, layout); }

    static LayoutSpec seg_layout_spec(const std::string& prefix, const SegModuleLayout& layout) {
        LayoutSpec s;
        append_layout(s, prefix + "enc.", layout.encoder);
        append_layout(s, prefix + "seg.", layout.seg_head);
        append_layout(s, prefix + "proj.", layout.proj_head);
        append_layout(s, prefix + "tr.", layout.translator);
        return s;
    }
};

template <class T>
SegModule<T> make_seg_module(std::string prefix, Domain domain, const SegArch& arch, std::uint64_t seed) {
    SegModule<T> m;
    m.prefix = std::move(prefix);
    m.domain = domain;
    m.arch = arch;
    m.layout = make_seg_layout(arch);
    m.params = init_parameters<T>(m.layout_spec(), seed);
    return m;
}

template <class T>
struct ModuleOutput {
    Tensor<T> translated;   // (N,1,H,W) in [-1,1]
    Tensor<T> logits;       // (N,C,H,W)
    Tensor<T> probs;        // softmax of logits over C
    Tensor<T> embedding;    // (N,D,H,W)
};

// Runs one encoder pass and all three branches on a batch (N,1,H,W).
template <class T>
ModuleOutput<T> forward_module(const SegModule<T>& m, const Tensor<T>& image) {
    if (image.rank() != 4 || image.dim(1) != m.arch.in_channels) {
        throw ShapeError("forward_module: expected (N," + std::to_string(m.arch.in_channels) +
                         ",H,W) input, got " + shape_str(image.shape()));
    }
    if (image.dim(2) % kDownsampleFactor != 0 || image.dim(3) % kDownsampleFactor != 0) {
        throw ShapeError("forward_module: spatial extent " + std::to_string(image.dim(2)) + "x" +
                         std::to_string(image.dim(3)) + " must be a multiple of " +
                         std::to_string(kDownsampleFactor));
    }
    const auto& L = m.layout;
    const auto& ps = m.params;
    const std::string enc = m.prefix + "enc.";
    Tensor<T> e1 = apply_layer(L.encoder[0], ps, enc, image);
    Tensor<T> e2 = apply_layer(L.encoder[1], ps, enc, e1);
    Tensor<T> e3 = apply_layer(L.encoder[2], ps, enc, e2);

    auto run_head = [&](const std::vector<ConvLayerSpec>& layers, const std::string& pfx) {
        Tensor<T> h = e3;
        for (const auto& l : layers) h = apply_layer(l, ps, pfx, h);
        return h;
    };

    ModuleOutput<T> out;
    out.logits = run_head(L.seg_head, m.prefix + "seg.");
    out.probs = softmax_channel(out.logits);
    out.embedding = run_head(L.proj_head, m.prefix + "proj.");

    const std::string tr = m.prefix + "tr.";
    Tensor<T> t = concat_channel<T>({upsample_nearest(e3, 2), e2});
    t = apply_layer(L.translator[0], ps, tr, t);
    t = concat_channel<T>({upsample_nearest(t, 2), e1});
    t = apply_layer(L.translator[1], ps, tr, t);
    out.translated = apply_layer(L.translator[2], ps, tr, t);
    return out;
}

// ---------------------------------------------------------------- discriminators

enum class DiscInput { image, segmentation };

template <class T>
struct PatchDiscriminator {
    std::string prefix;
    DiscInput kind = DiscInput::image;
    std::size_t in_channels = 1;
    std::vector<ConvLayerSpec> layers;
    ParameterSet<T> params;
};

inline std::vector<ConvLayerSpec> patch_disc_layers(std::size_t in_channels, std::size_t width = 16) {
    return {
        {"d1", in_channels, width, 4, 2, 1, 1, Activation::leaky_relu},
        {"d2", width, 2 * width, 4, 2, 1, 1, Activation::leaky_relu},
        {"d3", 2 * width, 4 * width, 4, 2, 1, 1, Activation::leaky_relu},
        {"out", 4 * width, 1, 3, 1, 1, 1, Activation::none},
    };
}

template <class T>
PatchDiscriminator<T> make_discriminator(std::string prefix, DiscInput kind, std::size_t in_channels,
                                         std::uint64_t seed, std::size_t width = 16) {
    PatchDiscriminator<T> d;
    d.prefix = std::move(prefix);
    d.kind = kind;
    d.in_channels = in_channels;
    d.layers = patch_disc_layers(in_channels, width);
    LayoutSpec spec;
    append_layout(spec, d.prefix, d.layers);
    d.params = init_parameters<T>(spec, seed);
    return d;
}

// Patch score map (N,1,H/8,W/8).
template <class T>
Tensor<T> discriminate(const PatchDiscriminator<T>& d, const Tensor<T>& input) {
    if (input.rank() != 4 || input.dim(1) != d.in_channels) {
        throw ShapeError("discriminate: " + std::string(d.kind == DiscInput::image ? "image" : "segmentation") +
                         " discriminator expects " + std::to_string(d.in_channels) +
                         " channels, got shape " + shape_str(input.shape()));
    }
    Tensor<T> h = input;
    for (const auto& l : d.layers) h = apply_layer(l, d.params, d.prefix, h);
    return h;
}

}  // namespace pseg
