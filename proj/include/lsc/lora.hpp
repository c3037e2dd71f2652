#pragma once

#include <set>
#include <string>
#include <vector>

#include "lsc/heads.hpp"
#include "lsc/model.hpp"

namespace lsc {

enum class LoraTarget { kQuery, kKey, kValue, kOutput };

inline const char* lora_target_name(LoraTarget t) {
    switch (t) {
        case LoraTarget::kQuery: return "query";
        case LoraTarget::kKey: return "key";
        case LoraTarget::kValue: return "value";
        default: return "output";
    }
}

inline LoraTarget parse_lora_target(const std::string& s) {
    if (s == "query" || s == "q") return LoraTarget::kQuery;
    if (s == "key" || s == "k") return LoraTarget::kKey;
    if (s == "value" || s == "v") return LoraTarget::kValue;
    if (s == "output" || s == "o") return LoraTarget::kOutput;
    throw ConfigError("unknown LoRA target \"" + s + "\" (expected query|key|value|output)");
}

struct LoraConfig {
    std::size_t rank = 12;
    double alpha = 32.0;
    double dropout_p = 0.1;
    std::set<LoraTarget> targets = {LoraTarget::kQuery, LoraTarget::kValue};

    double scale() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) throw ConfigError("lora config: rank must be >= 1");
        if (!(alpha > 0.0)) throw ConfigError("lora config: alpha must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("lora config: dropout must be in [0,1)");
        if (targets.empty()) throw ConfigError("lora config: target projection set is empty");
    }
};

namespace detail {

template <typename Real>
void attach_adapter(Linear<Real>& layer, const LoraConfig& cfg, Rng& rng) {
    typename Linear<Real>::Adapter ad;
    ad.a = Tensor<Real>::randn({cfg.rank, layer.d_in()}, rng, Real(0.02), /*requires_grad=*/true);
    ad.b = Tensor<Real>::zeros({layer.d_out(), cfg.rank}, /*requires_grad=*/true);
    ad.scale = static_cast<Real>(cfg.scale());
    ad.dropout_p = static_cast<Real>(cfg.dropout_p);
    layer.adapter = ad;
    layer.weight.set_requires_grad(false);
}

}  // namespace detail

// Wraps the targeted attention projections of every block with trainable
// rank-r deltas and freezes all base weights. B starts at zero, so the
// adapted model is initially identical to the base model.
template <typename Real>
void inject_lora(DecoderStack<Real>& model, const LoraConfig& cfg, Rng& rng) {
    cfg.validate();
    for (auto& blk : model.blocks) {
        if (cfg.targets.count(LoraTarget::kQuery)) detail::attach_adapter(blk.wq, cfg, rng);
        if (cfg.targets.count(LoraTarget::kKey)) detail::attach_adapter(blk.wk, cfg, rng);
        if (cfg.targets.count(LoraTarget::kValue)) detail::attach_adapter(blk.wv, cfg, rng);
        if (cfg.targets.count(LoraTarget::kOutput)) detail::attach_adapter(blk.wo, cfg, rng);
        blk.attn_norm.set_requires_grad(false);
        blk.ffn_norm.set_requires_grad(false);
        blk.wq.weight.set_requires_grad(false);
        blk.wk.weight.set_requires_grad(false);
        blk.wv.weight.set_requires_grad(false);
        blk.wo.weight.set_requires_grad(false);
        blk.w_gate.weight.set_requires_grad(false);
        blk.w_up.weight.set_requires_grad(false);
        blk.w_down.weight.set_requires_grad(false);
    }
    model.embed.set_requires_grad(false);
    if (model.cfg.position_mode == PositionMode::kLearnedAbsolute) {
        model.pos_embed.set_requires_grad(false);
    }
    model.final_norm.set_requires_grad(false);
    model.lora_injected = true;
}

// Adapter matrices of an injected model, in checkpoint naming order.
template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>>> lora_parameters(const DecoderStack<Real>& model) {
    if (!model.lora_injected) {
        throw ContractError("lora_parameters: model has no injected adapters");
    }
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    for (const auto& [name, t] : model.named_parameters()) {
        if (name.ends_with(".lora_a") || name.ends_with(".lora_b")) out.emplace_back(name, t);
    }
    return out;
}

// Exactly the A/B matrices plus the head parameters; no base weight appears.
template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>>> trainable_parameters(const DecoderStack<Real>& model,
                                                                       const Projection<Real>& head_proj) {
    auto out = lora_parameters(model);
    for (auto& p : head_proj.named_parameters("head")) out.push_back(std::move(p));
    return out;
}

// Closed-form trainable-parameter count for square d_model projections:
// n_layers * |targets| * r * (d_in + d_out) + head parameters.
inline std::size_t lora_trainable_count(const ModelConfig& mcfg, const LoraConfig& lcfg,
                                        std::size_t head_params) {
    return mcfg.n_layers * lcfg.targets.size() * lcfg.rank * (mcfg.d_model + mcfg.d_model) + head_params;
}

// Folds the adapter into a plain weight: W + scale * B.A. Returns a copy of
// W when no adapter is attached.
template <typename Real>
Tensor<Real> merge(const Linear<Real>& layer) {
    Tensor<Real> merged = Tensor<Real>::from(layer.weight.shape(), layer.weight.value());
    if (!layer.adapter) return merged;
    const std::size_t d_out = layer.d_out(), d_in = layer.d_in(), r = layer.adapter->a.dim(0);
    const Real* pa = layer.adapter->a.data();
    const Real* pb = layer.adapter->b.data();
    for (std::size_t o = 0; o < d_out; ++o)
        for (std::size_t k = 0; k < r; ++k) {
            const Real bv = pb[o * r + k] * layer.adapter->scale;
            for (std::size_t i = 0; i < d_in; ++i) merged.data()[o * d_in + i] += bv * pa[k * d_in + i];
        }
    return merged;
}

}  // namespace lsc
