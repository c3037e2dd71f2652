#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lsc/tensor.hpp"

namespace lsc {

// Ordered set of label names with a bijective name<->index map and an
// ignore-index sentinel for padding / special positions.
class LabelSpace {
public:
    static constexpr int kDefaultIgnoreIndex = -100;

    LabelSpace() = default;
    explicit LabelSpace(std::vector<std::string> names, int ignore_index = kDefaultIgnoreIndex)
        : ignore_index_(ignore_index) {
        for (auto& n : names) add(n);
    }

    // Appends the name if new; returns its index either way.
    int add(const std::string& name) {
        auto it = index_.find(name);
        if (it != index_.end()) return it->second;
        const int idx = static_cast<int>(names_.size());
        if (idx == ignore_index_) {
            throw ConfigError("label space: ignore_index " + std::to_string(ignore_index_) +
                              " collides with label indices");
        }
        names_.push_back(name);
        index_.emplace(name, idx);
        return idx;
    }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("label space: unknown label \"" + name + "\"");
        return it->second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::string& name(int index) const {
        if (index < 0 || static_cast<std::size_t>(index) >= names_.size()) {
            throw ContractError("label space: index " + std::to_string(index) + " outside [0," +
                                std::to_string(names_.size()) + ")");
        }
        return names_[static_cast<std::size_t>(index)];
    }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    int ignore_index() const { return ignore_index_; }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, int> index_;
    int ignore_index_ = kDefaultIgnoreIndex;
};

enum class Pooling { kLast, kMax, kAverage };

inline const char* pooling_name(Pooling p) {
    switch (p) {
        case Pooling::kLast: return "last";
        case Pooling::kMax: return "max";
        default: return "average";
    }
}

inline Pooling parse_pooling(const std::string& s) {
    if (s == "last") return Pooling::kLast;
    if (s == "max") return Pooling::kMax;
    if (s == "average" || s == "mean") return Pooling::kAverage;
    throw ConfigError("unknown pooling strategy \"" + s + "\" (expected last|max|average)");
}

// Reduces per-token representations (b,s,d) to one vector per sequence,
// consuming only non-pad positions.
template <typename Real>
Tensor<Real> pool(const Tensor<Real>& h, const BoolMatrix& pad, Pooling strategy) {
    switch (strategy) {
        case Pooling::kLast: return pool_last(h, pad);
        case Pooling::kMax: return pool_max(h, pad);
        default: return pool_mean(h, pad);
    }
}

// Label-space projection. The default is a single linear layer; hidden > 0
// selects the one-hidden-layer variant (SiLU nonlinearity).
template <typename Real>
struct Projection {
    Tensor<Real> weight;         // (c, d_in)
    Tensor<Real> bias;           // (c)
    Tensor<Real> hidden_weight;  // (hidden, d), empty when hidden == 0
    Tensor<Real> hidden_bias;    // (hidden)

    static Projection init(std::size_t classes, std::size_t d_model, Rng& rng, std::size_t hidden = 0,
                           Real stddev = Real(0.02)) {
        if (classes < 1) throw ConfigError("projection: need at least one class");
        Projection p;
        if (hidden > 0) {
            p.hidden_weight = Tensor<Real>::randn({hidden, d_model}, rng, stddev, true);
            p.hidden_bias = Tensor<Real>::zeros({hidden}, true);
            p.weight = Tensor<Real>::randn({classes, hidden}, rng, stddev, true);
        } else {
            p.weight = Tensor<Real>::randn({classes, d_model}, rng, stddev, true);
        }
        p.bias = Tensor<Real>::zeros({classes}, true);
        return p;
    }

    std::size_t classes() const { return weight.dim(0); }
    std::size_t input_dim() const {
        return hidden_weight.numel() > 0 ? hidden_weight.dim(1) : weight.dim(1);
    }
    bool has_hidden() const { return hidden_weight.numel() > 0; }

    // x: (n, d) -> (n, c)
    Tensor<Real> apply(const Tensor<Real>& x) const {
        if (x.rank() != 2 || x.dim(1) != input_dim()) {
            throw ShapeError("projection: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
        }
        Tensor<Real> z = x;
        if (has_hidden()) {
            z = silu(add_row(matmul_bt(z, hidden_weight), hidden_bias));
        }
        return add_row(matmul_bt(z, weight), bias);
    }

    std::vector<std::pair<std::string, Tensor<Real>>> named_parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        if (has_hidden()) {
            out.emplace_back(prefix + ".hidden_weight", hidden_weight);
            out.emplace_back(prefix + ".hidden_bias", hidden_bias);
        }
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
        return out;
    }
};

template <typename Real>
struct SequenceHead {
    Projection<Real> proj;
    Pooling pooling = Pooling::kLast;

    static SequenceHead init(std::size_t classes, std::size_t d_model, Pooling pooling, Rng& rng,
                             std::size_t hidden = 0) {
        return SequenceHead{Projection<Real>::init(classes, d_model, rng, hidden), pooling};
    }
};

template <typename Real>
struct TokenHead {
    Projection<Real> proj;

    static TokenHead init(std::size_t classes, std::size_t d_model, Rng& rng, std::size_t hidden = 0) {
        return TokenHead{Projection<Real>::init(classes, d_model, rng, hidden)};
    }
};

// Pool-then-project: (b,s,d) -> (b,c). Argmax over the last axis is the
// predicted label index.
template <typename Real>
Tensor<Real> sequence_logits(const Tensor<Real>& h, const BoolMatrix& pad, const SequenceHead<Real>& head) {
    return head.proj.apply(pool(h, pad, head.pooling));
}

// Per-position projection: (b,s,d) -> (b,s,c). Pad positions still produce
// logits; the loss excludes them through ignore-index labels.
template <typename Real>
Tensor<Real> token_logits(const Tensor<Real>& h, const TokenHead<Real>& head) {
    if (h.rank() != 3) throw ShapeError("token_logits: expected (b,s,d) input, got " + shape_str(h.shape()));
    const std::size_t b = h.dim(0), s = h.dim(1), d = h.dim(2);
    Tensor<Real> flat = head.proj.apply(reshape(h, {b * s, d}));
    return reshape(flat, {b, s, head.proj.classes()});
}

}  // namespace lsc
