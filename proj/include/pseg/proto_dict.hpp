#pragma once

// Per-class FIFO prototype dictionaries and the prototype contrastive loss.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseg/alignment.hpp"
#include "pseg/tensor_io.hpp"

namespace pseg {

// Stored entries are plain values with no graph history.
template <class T>
class FeatureDictionary {
public:
    FeatureDictionary(std::size_t num_classes, std::size_t depth, std::size_t capacity)
        : depth_(depth), capacity_(capacity), queues_(num_classes) {
        if (num_classes == 0 || depth == 0 || capacity == 0) {
            throw std::invalid_argument("FeatureDictionary: classes, depth and capacity must be positive");
        }
    }

    std::size_t num_classes() const { return queues_.size(); }
    std::size_t depth() const { return depth_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t occupancy(std::size_t cls) const { return queues_.at(cls).size(); }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& q : queues_) n += q.size();
        return n;
    }

    // Oldest first.
    const std::deque<std::vector<T>>& entries(std::size_t cls) const { return queues_.at(cls); }

    void push(std::size_t cls, std::span<const T> v) {
        if (cls >= queues_.size()) {
            throw std::out_of_range("dict_push: class " + std::to_string(cls) + " >= " +
                                    std::to_string(queues_.size()));
        }
        if (v.size() != depth_) {
            throw ShapeError("dict_push: vector length " + std::to_string(v.size()) + " != depth " +
                             std::to_string(depth_));
        }
        auto& q = queues_[cls];
        q.emplace_back(v.begin(), v.end());
        while (q.size() > capacity_) q.pop_front();
    }

    // Class entries as a (L, depth) matrix, oldest first.
    Tensor<T> matrix(std::size_t cls) const {
        const auto& q = queues_.at(cls);
        if (q.empty()) throw std::logic_error("empty dictionary class " + std::to_string(cls));
        std::vector<T> flat;
        flat.reserve(q.size() * depth_);
        for (const auto& e : q) flat.insert(flat.end(), e.begin(), e.end());
        return Tensor<T>::constant(Shape{q.size(), depth_}, std::move(flat));
    }

    // Class entries as a (depth, L) matrix, one entry per column.
    Tensor<T> columns(std::size_t cls) const {
        const auto& q = queues_.at(cls);
        if (q.empty()) throw std::logic_error("empty dictionary class " + std::to_string(cls));
        const std::size_t L = q.size();
        std::vector<T> flat(depth_ * L);
        for (std::size_t j = 0; j < L; ++j)
            for (std::size_t d = 0; d < depth_; ++d) flat[d * L + j] = q[j][d];
        return Tensor<T>::constant(Shape{depth_, L}, std::move(flat));
    }

private:
    std::size_t depth_;
    std::size_t capacity_;
    std::vector<std::deque<std::vector<T>>> queues_;
};

template <class T>
void dict_push(FeatureDictionary<T>& dict, const Prototype<T>& proto) {
    dict.push(proto.class_id, proto.vector.data());
}

// Cosine similarity of the query against every stored entry of `cls`, in
// storage order. nullopt when the class queue is empty.
template <class T>
std::optional<Tensor<T>> class_similarities(const Prototype<T>& query, const FeatureDictionary<T>& dict,
                                            std::size_t cls) {
    if (query.vector.numel() != dict.depth()) {
        throw ShapeError("class_similarities: query length " + std::to_string(query.vector.numel()) +
                         " != depth " + std::to_string(dict.depth()));
    }
    if (dict.occupancy(cls) == 0) return std::nullopt;
    return cosine_columns(query.vector, dict.columns(cls));
}

enum class Aggregation { mean_top_k, mean_all, max_similarity };

inline const char* aggregation_name(Aggregation a) {
    switch (a) {
        case Aggregation::mean_top_k: return "mean_top_k";
        case Aggregation::mean_all: return "mean_all";
        case Aggregation::max_similarity: return "max_similarity";
    }
    return "?";
}

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "mean_top_k") return Aggregation::mean_top_k;
    if (s == "mean_all") return Aggregation::mean_all;
    if (s == "max_similarity") return Aggregation::max_similarity;
    throw std::invalid_argument("unknown aggregation '" + s + "'");
}

struct AggregationStrategy {
    Aggregation kind = Aggregation::mean_top_k;
    std::size_t k = 20;
};

// Indices of the k largest values, returned in increasing index order so
// that k >= L sums in storage order exactly like mean_all.
template <class T>
std::vector<std::size_t> top_k_indices(std::span<const T> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (k < v.size()) {
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

template <class T>
Tensor<T> aggregate(const Tensor<T>& similarities, const AggregationStrategy& strategy) {
    if (similarities.rank() != 1) throw ShapeError("aggregate: expected a vector");
    if (strategy.k == 0) throw std::invalid_argument("aggregate: k must be >= 1");
    switch (strategy.kind) {
        case Aggregation::mean_all: return mean(similarities);
        case Aggregation::max_similarity: return max_reduce(similarities);
        case Aggregation::mean_top_k:
            return mean(gather(similarities, 0, top_k_indices(similarities.data(), strategy.k)));
    }
    throw std::invalid_argument("aggregate: unknown strategy");
}

template <class T>
struct ContrastiveResult {
    Tensor<T> loss;
    bool active = false;              // false: nothing contributed, loss is exactly 0
    std::size_t contributing = 0;     // queries averaged over
};

// For each query of class m whose own queue is non-empty:
//   v^{m,c} = aggregate(cos(query, B^c)) for every non-empty class c
//   l_m     = -log( exp(v^{m,m}/tau) / sum_c exp(v^{m,c}/tau) )
// and the result is the mean of l_m over contributing queries.
template <class T>
ContrastiveResult<T> loss_cl(const std::vector<Prototype<T>>& queries, const FeatureDictionary<T>& dict,
                             double tau, const AggregationStrategy& strategy) {
    if (!(tau > 0.0)) throw DomainError("loss_cl: temperature must be positive");
    std::vector<std::size_t> present;
    std::vector<Tensor<T>> bank;
    for (std::size_t c = 0; c < dict.num_classes(); ++c)
        if (dict.occupancy(c) > 0) {
            present.push_back(c);
            bank.push_back(dict.columns(c));
        }

    std::vector<Tensor<T>> per_query;
    for (const auto& q : queries) {
        if (q.class_id >= dict.num_classes() || dict.occupancy(q.class_id) == 0) continue;
        std::vector<Tensor<T>> logits;
        std::size_t pos = 0;
        if (q.vector.numel() != dict.depth()) throw ShapeError("loss_cl: query length != dictionary depth");
        for (std::size_t i = 0; i < present.size(); ++i) {
            if (present[i] == q.class_id) pos = i;
            const Tensor<T> sims = cosine_columns(q.vector, bank[i]);
            logits.push_back(reshape(div_scalar(aggregate(sims, strategy), static_cast<T>(tau)), Shape{1}));
        }
        const Tensor<T> z = concat(logits, 0);
        // log-sum-exp with the (constant) max subtracted.
        const T shift = *std::max_element(z.data().begin(), z.data().end());
        const Tensor<T> lse = add_scalar(log(sum(exp(add_scalar(z, -shift)))), shift);
        const Tensor<T> positive = reshape(slice(z, 0, pos, pos + 1), Shape{});
        per_query.push_back(reshape(sub(lse, positive), Shape{1}));
    }
    ContrastiveResult<T> r;
    if (per_query.empty()) {
        r.loss = Tensor<T>::scalar(T(0));
        return r;
    }
    r.active = true;
    r.contributing = per_query.size();
    r.loss = mean(concat(per_query, 0));
    return r;
}

// Writes one PSEG file per non-empty class (L x depth, oldest first) and
// counts.txt with "class count" lines.
template <class T>
void dump_dictionary(const FeatureDictionary<T>& dict, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream counts(dir / "counts.txt");
    if (!counts) throw FormatError((dir / "counts.txt").string() + ": cannot open for writing");
    counts << "# depth " << dict.depth() << " capacity " << dict.capacity() << '\n';
    for (std::size_t c = 0; c < dict.num_classes(); ++c) {
        counts << c << ' ' << dict.occupancy(c) << '\n';
        if (dict.occupancy(c) == 0) continue;
        char name[32];
        std::snprintf(name, sizeof(name), "class_%02zu.pseg", c);
        write_tensor(dir / name, dict.matrix(c));
    }
}

}  // namespace pseg
