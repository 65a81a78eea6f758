#pragma once

// Parameter containers, initialisation, Adam and checkpoints.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"
#include "pseg/tensor_io.hpp"

namespace pseg {

struct ParamSpec {
    std::string id;
    Shape shape;
    std::size_t fan_in = 1;
    bool is_bias = false;
};

using LayoutSpec = std::vector<ParamSpec>;

// Ordered id -> parameter tensor map. Every entry is a named leaf, normally
// one that requires a gradient.
template <class T>
class ParameterSet {
public:
    void insert(Tensor<T> t) {
        if (t.name().empty()) throw std::invalid_argument("parameter without id");
        if (index_.count(t.name())) throw std::invalid_argument("duplicate parameter id '" + t.name() + "'");
        index_.emplace(t.name(), entries_.size());
        entries_.push_back(std::move(t));
    }

    const Tensor<T>& at(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw std::out_of_range("unknown parameter id '" + id + "'");
        return entries_[it->second];
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.numel();
        return n;
    }

    // Entries whose id starts with `prefix`.
    ParameterSet subset(const std::string& prefix) const {
        ParameterSet out;
        for (const auto& e : entries_)
            if (e.name().rfind(prefix, 0) == 0) out.insert(e);
        return out;
    }

    void merge(const ParameterSet& other) {
        for (const auto& e : other) insert(e);
    }

private:
    std::vector<Tensor<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

// Same ids and values, no gradients: forward passes build no graph.
template <class T>
ParameterSet<T> frozen(const ParameterSet<T>& params) {
    ParameterSet<T> out;
    for (const auto& p : params) {
        out.insert(Tensor<T>::named_constant(p.name(), p.shape(), std::vector<T>(p.data().begin(), p.data().end())));
    }
    return out;
}

// Weights ~ N(0, sqrt(2 / fan_in)), biases zero; deterministic in `seed`.
template <class T>
ParameterSet<T> init_parameters(const LayoutSpec& spec, std::uint64_t seed) {
    if (spec.empty()) throw std::invalid_argument("init_parameters: empty layout");
    std::mt19937_64 rng(seed);
    ParameterSet<T> out;
    for (const auto& p : spec) {
        const std::size_t n = numel(p.shape);
        if (n == 0) throw ShapeError("init_parameters: zero-extent shape for '" + p.id + "'");
        std::vector<T> v(n, T(0));
        if (!p.is_bias) {
            if (p.fan_in == 0) throw ShapeError("init_parameters: zero fan_in for '" + p.id + "'");
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
            for (auto& x : v) x = static_cast<T>(dist(rng));
        }
        out.insert(Tensor<T>::parameter(p.id, p.shape, std::move(v)));
    }
    return out;
}

struct AdamHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

template <class T>
struct AdamState {
    AdamHyper hyper;
    std::uint64_t t = 0;
    std::map<std::string, std::vector<T>> m;
    std::map<std::string, std::vector<T>> v;
};

template <class T>
struct AdamResult {
    ParameterSet<T> params;
    AdamState<T> state;
};

// One Adam step with coupled weight decay (wd * theta added to the gradient).
// Pure: inputs are not modified.
template <class T>
AdamResult<T> adam_step(const ParameterSet<T>& params, const GradientMap<T>& grads,
                        const AdamState<T>& state) {
    const auto& h = state.hyper;
    AdamResult<T> r{{}, state};
    r.state.t = state.t + 1;
    const double t = static_cast<double>(r.state.t);
    const double bc1 = 1.0 - std::pow(h.beta1, t);
    const double bc2 = 1.0 - std::pow(h.beta2, t);
    for (const auto& p : params) {
        const auto& id = p.name();
        auto git = grads.find(id);
        if (git == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + id + "'");
        const auto& g = git->second;
        if (g.size() != p.numel()) {
            throw ShapeError("adam_step: gradient for '" + id + "' has " + std::to_string(g.size()) +
                             " values, parameter has " + std::to_string(p.numel()));
        }
        for (T gv : g) {
            if (!std::isfinite(static_cast<double>(gv))) {
                throw DomainError("adam_step: non-finite gradient for '" + id + "'");
            }
        }
        auto& m = r.state.m[id];
        auto& v = r.state.v[id];
        if (m.empty()) m.assign(p.numel(), T(0));
        if (v.empty()) v.assign(p.numel(), T(0));
        std::vector<T> theta(p.data().begin(), p.data().end());
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const T gi = g[i] + static_cast<T>(h.weight_decay) * theta[i];
            m[i] = static_cast<T>(h.beta1) * m[i] + static_cast<T>(1.0 - h.beta1) * gi;
            v[i] = static_cast<T>(h.beta2) * v[i] + static_cast<T>(1.0 - h.beta2) * gi * gi;
            const T mhat = m[i] / static_cast<T>(bc1);
            const T vhat = v[i] / static_cast<T>(bc2);
            theta[i] -= static_cast<T>(h.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(h.eps));
        }
        r.params.insert(Tensor<T>::parameter(id, p.shape(), std::move(theta)));
    }
    return r;
}

// Adds zero gradients for parameters the loss never reached.
template <class T>
GradientMap<T> complete_gradients(const ParameterSet<T>& params, GradientMap<T> grads) {
    for (const auto& p : params)
        if (!grads.count(p.name())) grads.emplace(p.name(), std::vector<T>(p.numel(), T(0)));
    return grads;
}

// ---------------------------------------------------------------- checkpoints
//
// A checkpoint directory holds one PSEG file per parameter (named by id)
// and manifest.txt with "id dims..." per line in insertion order.

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<T>& params) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw FormatError((dir / "manifest.txt").string() + ": cannot open for writing");
    manifest << "# pseg checkpoint " << dtype_name(dtype_of<T>()) << ' ' << params.size() << '\n';
    for (const auto& p : params) {
        write_tensor(dir / (p.name() + ".pseg"), p);
        manifest << p.name();
        for (auto d : p.shape()) manifest << ' ' << d;
        manifest << '\n';
    }
}

template <class T>
ParameterSet<T> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw FormatError((dir / "manifest.txt").string() + ": cannot open");
    ParameterSet<T> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string id;
        ls >> id;
        Shape shape;
        for (std::size_t d; ls >> d;) shape.push_back(d);
        auto a = read_array<T>(dir / (id + ".pseg"));
        if (a.shape != shape) {
            throw FormatError(id + ": manifest shape " + shape_str(shape) + " differs from file " +
                              shape_str(a.shape));
        }
        out.insert(Tensor<T>::parameter(id, std::move(a.shape), std::move(a.values)));
    }
    return out;
}

}  // namespace pseg
