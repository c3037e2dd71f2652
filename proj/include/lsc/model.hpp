#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lsc/tensor.hpp"

namespace lsc {

// Finite stand-in for the -inf entries of the causal mask matrix: large
// enough to drive attention weights below 1e-6 (they underflow to exact 0
// after max-subtraction), small enough to avoid inf - inf = NaN.
inline constexpr double kNegLarge = -1e9;

enum class MaskMode { kCausal, kUnmasked };
enum class PositionMode { kRotary, kLearnedAbsolute };

inline const char* mask_mode_name(MaskMode m) { return m == MaskMode::kCausal ? "causal" : "unmasked"; }

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "causal") return MaskMode::kCausal;
    if (s == "unmasked") return MaskMode::kUnmasked;
    throw ConfigError("unknown mask mode \"" + s + "\" (expected causal|unmasked)");
}

inline const char* position_mode_name(PositionMode p) {
    return p == PositionMode::kRotary ? "rotary" : "learned";
}

inline PositionMode parse_position_mode(const std::string& s) {
    if (s == "rotary") return PositionMode::kRotary;
    if (s == "learned") return PositionMode::kLearnedAbsolute;
    throw ConfigError("unknown position mode \"" + s + "\" (expected rotary|learned)");
}

struct ModelConfig {
    std::size_t vocab_size = 1024;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ff = 128;
    std::size_t max_seq_len = 64;
    double dropout_p = 0.0;
    double norm_epsilon = 1e-5;
    MaskMode mask_mode = MaskMode::kCausal;
    PositionMode position_mode = PositionMode::kRotary;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || max_seq_len < 1) {
            throw ConfigError("model config: all sizes must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (dropout_p < 0.0 || dropout_p >= 1.0) {
            throw ConfigError("model config: dropout_p must be in [0,1)");
        }
        if (norm_epsilon <= 0.0) {
            throw ConfigError("model config: norm_epsilon must be positive");
        }
        if (head_dim() % 2 != 0 && position_mode == PositionMode::kRotary) {
            throw ConfigError("model config: rotary positions require an even head dim, got " +
                              std::to_string(head_dim()));
        }
    }
};

// Per-pass state: training enables dropout and requires an rng.
struct ForwardCtx {
    bool training = false;
    Rng* rng = nullptr;
};

// Additive attention mask: (s,s) matrix of {0, kNegLarge} plus an optional
// per-batch key padding mask. Padding keys are masked in both modes.
template <typename Real>
struct AttentionMask {
    std::size_t seq_len = 0;
    Tensor<Real> additive;   // (s, s)
    BoolMatrix key_padding;  // (b, s); empty means no padding

    bool is_causal() const {
        return seq_len > 1 && additive.at({0, 1}) != Real(0);
    }
};

// Strict upper triangle kNegLarge (position i may attend to 0..i).
template <typename Real>
AttentionMask<Real> build_causal_mask(std::size_t seq_len) {
    if (seq_len == 0) throw ShapeError("attention mask: seq_len must be >= 1");
    AttentionMask<Real> m;
    m.seq_len = seq_len;
    m.additive = Tensor<Real>::zeros({seq_len, seq_len});
    for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = i + 1; j < seq_len; ++j)
            m.additive.data()[i * seq_len + j] = static_cast<Real>(kNegLarge);
    return m;
}

// All-zero additive matrix: every position attends to every non-pad position.
template <typename Real>
AttentionMask<Real> build_unmasked(std::size_t seq_len) {
    if (seq_len == 0) throw ShapeError("attention mask: seq_len must be >= 1");
    AttentionMask<Real> m;
    m.seq_len = seq_len;
    m.additive = Tensor<Real>::zeros({seq_len, seq_len});
    return m;
}

template <typename Real>
AttentionMask<Real> build_mask(MaskMode mode, std::size_t seq_len) {
    return mode == MaskMode::kCausal ? build_causal_mask<Real>(seq_len) : build_unmasked<Real>(seq_len);
}

// Adds mask.additive[i,j] (broadcast over batch and heads) and the key
// padding penalty to raw attention scores. The mask is constant, so backward
// is a pass-through.
template <typename Real>
Tensor<Real> add_attention_mask(const Tensor<Real>& scores, const AttentionMask<Real>& mask) {
    if (scores.rank() != 4 || scores.dim(2) != mask.seq_len || scores.dim(3) != mask.seq_len) {
        throw ShapeError("attention mask: scores " + shape_str(scores.shape()) +
                         " do not match mask seq_len " + std::to_string(mask.seq_len));
    }
    const std::size_t B = scores.dim(0), H = scores.dim(1), S = scores.dim(2);
    if (!mask.key_padding.empty() && (mask.key_padding.rows != B || mask.key_padding.cols != S)) {
        throw ShapeError("attention mask: key padding " + std::to_string(mask.key_padding.rows) + "x" +
                         std::to_string(mask.key_padding.cols) + " does not match scores " +
                         shape_str(scores.shape()));
    }
    Tensor<Real> out = Tensor<Real>::zeros(scores.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < S; ++i)
                for (std::size_t j = 0; j < S; ++j) {
                    Real v = scores.data()[((b * H + h) * S + i) * S + j] + mask.additive.data()[i * S + j];
                    if (!mask.key_padding.empty() && !mask.key_padding.at(b, j)) {
                        v += static_cast<Real>(kNegLarge);
                    }
                    out.data()[((b * H + h) * S + i) * S + j] = v;
                }
    if (detail::should_record<Real>({&scores})) {
        out.set_requires_grad(true);
        auto si = scores.impl(), oi = out.impl();
        Tape<Real>::active()->record("add_attention_mask", {si}, oi, [si, oi] {
            const std::size_t n = oi->value.size();
            for (std::size_t i = 0; i < n; ++i) si->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// Scaled dot-product attention: softmax(q.k^T / sqrt(d_h) + mask).v.
template <typename Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       const AttentionMask<Real>& mask) {
    if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("attention: q/k/v shapes must match, got " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    if (q.dim(2) != mask.seq_len) {
        throw ShapeError("attention: mask seq_len " + std::to_string(mask.seq_len) + " does not match q " +
                         shape_str(q.shape()));
    }
    const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(q.dim(3)));
    Tensor<Real> scores = scale(matmul_bt(q, k), inv_sqrt_dh);
    Tensor<Real> masked = add_attention_mask(scores, mask);
    Tensor<Real> probs = softmax_lastdim(masked);
    return matmul(probs, v);
}

// Bias-free linear projection (weights stored one row per output feature)
// with an optional low-rank adapter. When an adapter is attached the base
// weight is frozen and the layer computes
//   y = x.W^T + scale * dropout(x).A^T.B^T.
template <typename Real>
struct Linear {
    Tensor<Real> weight;  // (d_out, d_in)

    struct Adapter {
        Tensor<Real> a;  // (r, d_in), trainable
        Tensor<Real> b;  // (d_out, r), trainable, zero-initialized
        Real scale = 0;
        Real dropout_p = 0;
    };
    std::optional<Adapter> adapter;

    static Linear init(std::size_t d_out, std::size_t d_in, Rng& rng, Real stddev) {
        Linear l;
        l.weight = Tensor<Real>::randn({d_out, d_in}, rng, stddev, /*requires_grad=*/true);
        return l;
    }

    std::size_t d_out() const { return weight.dim(0); }
    std::size_t d_in() const { return weight.dim(1); }

    Tensor<Real> forward(const Tensor<Real>& x, const ForwardCtx& ctx) const {
        Tensor<Real> y = matmul_bt(x, weight);
        if (adapter) {
            Tensor<Real> xd = dropout(x, adapter->dropout_p, ctx.rng, ctx.training);
            Tensor<Real> delta = matmul_bt(matmul_bt(xd, adapter->a), adapter->b);
            y = add(y, scale(delta, adapter->scale));
        }
        return y;
    }
};

template <typename Real>
struct DecoderBlock {
    Tensor<Real> attn_norm;  // (d) rmsnorm gain
    Linear<Real> wq, wk, wv, wo;
    Tensor<Real> ffn_norm;  // (d)
    Linear<Real> w_gate, w_up, w_down;
};

// LLaMA-shaped decoder stack: token embedding, pre-norm blocks of rotary
// multi-head self-attention and SiLU-gated feed-forward, final rmsnorm. The
// self-attention mask is switchable between causal and unmasked through
// ModelConfig::mask_mode.
template <typename Real>
class DecoderStack {
public:
    ModelConfig cfg;
    Tensor<Real> embed;      // (vocab, d)
    Tensor<Real> pos_embed;  // (max_seq_len, d), learned-absolute mode only
    std::vector<DecoderBlock<Real>> blocks;
    Tensor<Real> final_norm;  // (d)
    bool lora_injected = false;

    static DecoderStack init(const ModelConfig& cfg, Rng& rng, Real init_std = Real(0.02)) {
        cfg.validate();
        DecoderStack m;
        m.cfg = cfg;
        m.embed = Tensor<Real>::randn({cfg.vocab_size, cfg.d_model}, rng, init_std, true);
        if (cfg.position_mode == PositionMode::kLearnedAbsolute) {
            m.pos_embed = Tensor<Real>::randn({cfg.max_seq_len, cfg.d_model}, rng, init_std, true);
        }
        m.blocks.reserve(cfg.n_layers);
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            DecoderBlock<Real> blk;
            blk.attn_norm = Tensor<Real>::full({cfg.d_model}, Real(1), true);
            blk.wq = Linear<Real>::init(cfg.d_model, cfg.d_model, rng, init_std);
            blk.wk = Linear<Real>::init(cfg.d_model, cfg.d_model, rng, init_std);
            blk.wv = Linear<Real>::init(cfg.d_model, cfg.d_model, rng, init_std);
            blk.wo = Linear<Real>::init(cfg.d_model, cfg.d_model, rng, init_std);
            blk.ffn_norm = Tensor<Real>::full({cfg.d_model}, Real(1), true);
            blk.w_gate = Linear<Real>::init(cfg.d_ff, cfg.d_model, rng, init_std);
            blk.w_up = Linear<Real>::init(cfg.d_ff, cfg.d_model, rng, init_std);
            blk.w_down = Linear<Real>::init(cfg.d_model, cfg.d_ff, rng, init_std);
            m.blocks.push_back(std::move(blk));
        }
        m.final_norm = Tensor<Real>::full({cfg.d_model}, Real(1), true);
        m.build_rope_tables();
        return m;
    }

    // Per-token latent representations after the final normalization:
    // shape (batch, seq_len, d_model).
    Tensor<Real> forward(const IdMatrix& tokens, const BoolMatrix& pad, const ForwardCtx& ctx = {}) const {
        const std::size_t b = tokens.rows, s = tokens.cols;
        if (s == 0 || b == 0) throw ShapeError("forward: empty token batch");
        if (s > cfg.max_seq_len) {
            throw ShapeError("forward: sequence length " + std::to_string(s) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
        }
        if (pad.rows != b || pad.cols != s) {
            throw ShapeError("forward: pad mask " + std::to_string(pad.rows) + "x" + std::to_string(pad.cols) +
                             " does not match tokens " + std::to_string(b) + "x" + std::to_string(s));
        }
        if (ctx.training && cfg.dropout_p > 0.0 && ctx.rng == nullptr) {
            throw ContractError("forward: training mode with dropout requires an rng");
        }

        AttentionMask<Real> mask = build_mask<Real>(cfg.mask_mode, s);
        mask.key_padding = pad;

        Tensor<Real> x = embedding(embed, tokens);
        if (cfg.position_mode == PositionMode::kLearnedAbsolute) {
            x = add_positions(x, pos_embed);
        }
        const Real eps = static_cast<Real>(cfg.norm_epsilon);
        const Real drop = static_cast<Real>(cfg.dropout_p);
        const std::size_t h = cfg.n_heads, dh = cfg.head_dim();
        for (const DecoderBlock<Real>& blk : blocks) {
            Tensor<Real> hn = reshape(rmsnorm(x, blk.attn_norm, eps), {b * s, cfg.d_model});
            Tensor<Real> q = heads_view(blk.wq.forward(hn, ctx), b, s, h, dh);
            Tensor<Real> k = heads_view(blk.wk.forward(hn, ctx), b, s, h, dh);
            Tensor<Real> v = heads_view(blk.wv.forward(hn, ctx), b, s, h, dh);
            if (cfg.position_mode == PositionMode::kRotary) {
                q = rope_apply(q, rope_cos_, rope_sin_);
                k = rope_apply(k, rope_cos_, rope_sin_);
            }
            Tensor<Real> att = attention(q, k, v, mask);
            Tensor<Real> att_flat = reshape(transpose_12(att), {b * s, cfg.d_model});
            Tensor<Real> attn_out = reshape(blk.wo.forward(att_flat, ctx), {b, s, cfg.d_model});
            x = add(x, dropout(attn_out, drop, ctx.rng, ctx.training));

            Tensor<Real> fn = reshape(rmsnorm(x, blk.ffn_norm, eps), {b * s, cfg.d_model});
            Tensor<Real> gated = mul(silu(blk.w_gate.forward(fn, ctx)), blk.w_up.forward(fn, ctx));
            Tensor<Real> ffn_out = reshape(blk.w_down.forward(gated, ctx), {b, s, cfg.d_model});
            x = add(x, dropout(ffn_out, drop, ctx.rng, ctx.training));
        }
        return rmsnorm(x, final_norm, eps);
    }

    std::vector<std::pair<std::string, Tensor<Real>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<Real>>> out;
        out.emplace_back("embed.weight", embed);
        if (cfg.position_mode == PositionMode::kLearnedAbsolute) {
            out.emplace_back("pos.weight", pos_embed);
        }
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            const DecoderBlock<Real>& blk = blocks[i];
            out.emplace_back(p + "attn_norm.gain", blk.attn_norm);
            append_linear(out, p + "attn.wq", blk.wq);
            append_linear(out, p + "attn.wk", blk.wk);
            append_linear(out, p + "attn.wv", blk.wv);
            append_linear(out, p + "attn.wo", blk.wo);
            out.emplace_back(p + "ffn_norm.gain", blk.ffn_norm);
            append_linear(out, p + "ffn.w_gate", blk.w_gate);
            append_linear(out, p + "ffn.w_up", blk.w_up);
            append_linear(out, p + "ffn.w_down", blk.w_down);
        }
        out.emplace_back("final_norm.gain", final_norm);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

private:
    Tensor<Real> rope_cos_, rope_sin_;  // (max_seq_len, head_dim/2), constants

    void build_rope_tables() {
        if (cfg.position_mode != PositionMode::kRotary) return;
        const std::size_t p = cfg.head_dim() / 2;
        rope_cos_ = Tensor<Real>::zeros({cfg.max_seq_len, p});
        rope_sin_ = Tensor<Real>::zeros({cfg.max_seq_len, p});
        for (std::size_t s = 0; s < cfg.max_seq_len; ++s)
            for (std::size_t i = 0; i < p; ++i) {
                const double theta = static_cast<double>(s) *
                                     std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(cfg.head_dim()));
                rope_cos_.data()[s * p + i] = static_cast<Real>(std::cos(theta));
                rope_sin_.data()[s * p + i] = static_cast<Real>(std::sin(theta));
            }
    }

    static Tensor<Real> heads_view(const Tensor<Real>& flat, std::size_t b, std::size_t s, std::size_t h,
                                   std::size_t dh) {
        return transpose_12(reshape(flat, {b, s, h, dh}));
    }

    // y[b,s,:] = x[b,s,:] + table[s,:]
    static Tensor<Real> add_positions(const Tensor<Real>& x, const Tensor<Real>& table) {
        const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
        Tensor<Real> out = Tensor<Real>::zeros(x.shape());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t d = 0; d < D; ++d)
                    out.data()[(b * S + s) * D + d] = x.data()[(b * S + s) * D + d] + table.data()[s * D + d];
        if (detail::should_record<Real>({&x, &table})) {
            out.set_requires_grad(true);
            auto xi = x.impl(), ti = table.impl(), oi = out.impl();
            Tape<Real>::active()->record("add_positions", {xi, ti}, oi, [xi, ti, oi, B, S, D] {
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t s = 0; s < S; ++s)
                        for (std::size_t d = 0; d < D; ++d) {
                            detail::accumulate(xi, (b * S + s) * D + d, oi->grad[(b * S + s) * D + d]);
                            detail::accumulate(ti, s * D + d, oi->grad[(b * S + s) * D + d]);
                        }
            });
        }
        return out;
    }

    static void append_linear(std::vector<std::pair<std::string, Tensor<Real>>>& out, const std::string& name,
                              const Linear<Real>& l) {
        out.emplace_back(name + ".weight", l.weight);
        if (l.adapter) {
            out.emplace_back(name + ".lora_a", l.adapter->a);
            out.emplace_back(name + ".lora_b", l.adapter->b);
        }
    }
};

// Closed-form parameter count (base model, before adapter injection).
inline std::size_t base_parameter_count(const ModelConfig& cfg) {
    std::size_t n = cfg.vocab_size * cfg.d_model;
    if (cfg.position_mode == PositionMode::kLearnedAbsolute) n += cfg.max_seq_len * cfg.d_model;
    n += cfg.n_layers * (2 * cfg.d_model + 4 * cfg.d_model * cfg.d_model + 3 * cfg.d_model * cfg.d_ff);
    n += cfg.d_model;
    return n;
}

}  // namespace lsc
