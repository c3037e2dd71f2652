#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lsc/data.hpp"
#include "lsc/heads.hpp"
#include "lsc/lora.hpp"
#include "lsc/metrics.hpp"
#include "lsc/model.hpp"

namespace lsc {

struct AdamWConfig {
    double learning_rate = 8e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with bias correction and decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename Real>
class AdamW {
public:
    AdamW(std::vector<Tensor<Real>> params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), Real(0));
            v_[i].assign(params_[i].numel(), Real(0));
        }
    }

    void step() {
        ++t_;
        const Real lr = static_cast<Real>(cfg_.learning_rate);
        const Real b1 = static_cast<Real>(cfg_.beta1);
        const Real b2 = static_cast<Real>(cfg_.beta2);
        const Real eps = static_cast<Real>(cfg_.epsilon);
        const Real wd = static_cast<Real>(cfg_.weight_decay);
        const Real bc1 = Real(1) - static_cast<Real>(std::pow(cfg_.beta1, t_));
        const Real bc2 = Real(1) - static_cast<Real>(std::pow(cfg_.beta2, t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<Real>& p = params_[i];
            if (p.grad().size() != p.numel()) {
                throw ShapeError("adamw: gradient size " + std::to_string(p.grad().size()) +
                                 " does not match parameter " + shape_str(p.shape()));
            }
            Real* pv = p.data();
            const Real* g = p.grad().data();
            Real* m = m_[i].data();
            Real* v = v_[i].data();
            const std::size_t n = p.numel();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = b1 * m[j] + (Real(1) - b1) * g[j];
                v[j] = b2 * v[j] + (Real(1) - b2) * g[j] * g[j];
                const Real m_hat = m[j] / bc1;
                const Real v_hat = v[j] / bc2;
                pv[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * pv[j]);
            }
        }
    }

    long step_count() const { return t_; }
    const std::vector<Tensor<Real>>& params() const { return params_; }

private:
    std::vector<Tensor<Real>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<Real>> m_, v_;
    long t_ = 0;
};

struct TrainConfig {
    std::size_t batch_size = 8;
    double learning_rate = 8e-5;
    std::size_t max_steps = 300;
    std::size_t epochs = 0;  // > 0 derives the step budget from the data size
    std::size_t log_every = 100;
    std::uint64_t seed = 42;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double weight_decay = 0.01;
    bool allow_full_finetune = false;

    AdamWConfig adamw() const { return {learning_rate, beta1, beta2, adam_epsilon, weight_decay}; }

    void validate() const {
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
        if (log_every < 1) throw ConfigError("train config: log_every must be >= 1");
        if (max_steps < 1 && epochs < 1) throw ConfigError("train config: max_steps or epochs must be >= 1");
    }
};

struct MetricsRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double eval_loss = std::numeric_limits<double>::quiet_NaN();
    double eval_metric = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;  // telemetry; excluded from the metrics CSV
};

struct TrainOutput {
    std::vector<MetricsRecord> records;
    double final_train_loss = std::numeric_limits<double>::quiet_NaN();
    double final_eval_metric = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps_run = 0;
    bool diverged = false;
};

// The metrics CSV deliberately omits wall-clock timing so that identical
// (config, seed, data) runs produce byte-identical files.
inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("metrics: cannot write " + path);
    out << "step,train_loss,eval_loss,eval_metric\n";
    char buf[160];
    for (const MetricsRecord& r : records) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.step, r.train_loss, r.eval_loss,
                      r.eval_metric);
        out << buf;
    }
}

struct EvalResult {
    double loss = std::numeric_limits<double>::quiet_NaN();
    double metric = std::numeric_limits<double>::quiet_NaN();
};

struct TokenEvalResult {
    double loss = std::numeric_limits<double>::quiet_NaN();
    NerScore ner;
    double token_accuracy = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <typename T>
std::vector<T> gather(const std::vector<T>& data, std::span<const std::size_t> indices) {
    std::vector<T> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(data[i]);
    return out;
}

template <typename Real>
std::vector<int> argmax_rows(const std::vector<Real>& values, std::size_t rows, std::size_t cols) {
    std::vector<int> out(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* p = values.data() + r * cols;
        int best = 0;
        for (std::size_t c = 1; c < cols; ++c) {
            if (p[c] > p[best]) best = static_cast<int>(c);
        }
        out[r] = best;
    }
    return out;
}

// Shared step loop. make_loss builds the batch and returns the scalar loss
// under the active tape; evaluate returns {eval_loss, eval_metric}.
template <typename Real, typename MakeLoss, typename Evaluate>
TrainOutput run_training(std::size_t n_examples, std::vector<Tensor<Real>> params, const TrainConfig& cfg,
                         MakeLoss&& make_loss, Evaluate&& evaluate, bool has_eval) {
    if (n_examples == 0) throw ContractError("train: empty training set");
    if (cfg.batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    std::size_t steps = cfg.max_steps;
    if (cfg.epochs > 0) {
        const std::size_t per_epoch = (n_examples + cfg.batch_size - 1) / cfg.batch_size;
        steps = cfg.epochs * per_epoch;
    }
    if (steps == 0) throw ConfigError("train config: step budget is zero");

    Rng rng(cfg.seed);
    AdamW<Real> opt(std::move(params), cfg.adamw());
    std::vector<std::size_t> order(n_examples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = n_examples;  // triggers a shuffle on the first step

    TrainOutput out;
    double window_sum = 0.0;
    std::size_t window_count = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&t0] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    for (std::size_t step = 1; step <= steps; ++step) {
        if (cursor >= n_examples) {
            rng.shuffle(order);
            cursor = 0;
        }
        const std::size_t take = std::min(cfg.batch_size, n_examples - cursor);
        std::span<const std::size_t> indices(order.data() + cursor, take);
        cursor += take;

        double loss_val;
        {
            Tape<Real> tape;
            ForwardCtx ctx{true, &rng};
            Tensor<Real> loss = make_loss(indices, ctx);
            loss_val = static_cast<double>(loss.item());
            if (!std::isfinite(loss_val)) {
                out.records.push_back(MetricsRecord{step, loss_val,
                                                    std::numeric_limits<double>::quiet_NaN(),
                                                    std::numeric_limits<double>::quiet_NaN(), elapsed()});
                out.final_train_loss = loss_val;
                out.steps_run = step;
                out.diverged = true;
                return out;
            }
            tape.backward(loss);
        }
        opt.step();
        window_sum += loss_val;
        ++window_count;
        out.final_train_loss = loss_val;

        if (step % cfg.log_every == 0 || step == steps) {
            MetricsRecord rec;
            rec.step = step;
            rec.train_loss = window_sum / static_cast<double>(window_count);
            if (has_eval) {
                const EvalResult ev = evaluate();
                rec.eval_loss = ev.loss;
                rec.eval_metric = ev.metric;
                out.final_eval_metric = ev.metric;
            }
            rec.wall_seconds = elapsed();
            out.records.push_back(rec);
            window_sum = 0.0;
            window_count = 0;
        }
    }
    out.steps_run = steps;
    return out;
}

template <typename Real>
std::vector<Tensor<Real>> training_parameters(const DecoderStack<Real>& model, const Projection<Real>& head,
                                              const TrainConfig& cfg) {
    std::vector<Tensor<Real>> params;
    if (model.lora_injected) {
        for (auto& [name, t] : trainable_parameters(model, head)) params.push_back(t);
    } else if (cfg.allow_full_finetune) {
        for (auto& [name, t] : model.named_parameters()) params.push_back(t);
        for (auto& [name, t] : head.named_parameters("head")) params.push_back(t);
    } else {
        throw ContractError("train: model has no adapters; set allow_full_finetune to train base weights");
    }
    return params;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename Real>
EvalResult evaluate_sequence_full(const DecoderStack<Real>& model, const SequenceHead<Real>& head,
                                  const std::vector<SequenceExample>& data, const Vocabulary& vocab,
                                  const LabelSpace& labels, std::size_t batch_size, std::size_t max_len) {
    if (data.empty()) throw ContractError("evaluate: empty evaluation set");
    double loss_sum = 0.0;
    std::vector<int> preds, golds;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, data.size() - start);
        LabeledBatch batch = collate_sequence({data.data() + start, n}, vocab, labels, max_len);
        Tensor<Real> h = model.forward(batch.tokens, batch.pad);
        Tensor<Real> logits = sequence_logits(h, batch.pad, head);
        loss_sum += static_cast<double>(cross_entropy(logits, batch.sequence_labels, labels.ignore_index()).item()) *
                    static_cast<double>(n);
        std::vector<int> rows = detail::argmax_rows(logits.value(), n, labels.size());
        preds.insert(preds.end(), rows.begin(), rows.end());
        golds.insert(golds.end(), batch.sequence_labels.begin(), batch.sequence_labels.end());
    }
    return EvalResult{loss_sum / static_cast<double>(data.size()), accuracy(preds, golds)};
}

// Fraction of examples whose argmax logit equals the gold label.
template <typename Real>
double evaluate_sequence(const DecoderStack<Real>& model, const SequenceHead<Real>& head,
                         const std::vector<SequenceExample>& data, const Vocabulary& vocab,
                         const LabelSpace& labels, std::size_t batch_size = 8, std::size_t max_len = 64) {
    return evaluate_sequence_full(model, head, data, vocab, labels, batch_size, max_len).metric;
}

inline bool is_bio_label_space(const LabelSpace& labels) {
    for (const std::string& n : labels.names()) {
        if (n == "O") continue;
        if (n.size() >= 2 && (n[0] == 'B' || n[0] == 'I') && n[1] == '-') continue;
        return false;
    }
    return true;
}

template <typename Real>
TokenEvalResult evaluate_token_full(const DecoderStack<Real>& model, const TokenHead<Real>& head,
                                    const std::vector<TokenExample>& data, const Vocabulary& vocab,
                                    const LabelSpace& labels, std::size_t batch_size, std::size_t max_len) {
    if (data.empty()) throw ContractError("evaluate: empty evaluation set");
    const int ignore = labels.ignore_index();
    double loss_sum = 0.0;
    std::size_t loss_positions = 0;
    std::size_t correct = 0, counted = 0;
    std::vector<std::vector<std::string>> gold_tags, pred_tags;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, data.size() - start);
        LabeledBatch batch = collate_token({data.data() + start, n}, vocab, labels, max_len);
        const std::size_t s = batch.tokens.cols;
        Tensor<Real> h = model.forward(batch.tokens, batch.pad);
        Tensor<Real> logits = token_logits(h, head);
        Tensor<Real> flat = reshape(logits, {n * s, labels.size()});
        std::size_t valid = 0;
        for (int y : batch.token_labels) {
            if (y != ignore) ++valid;
        }
        loss_sum += static_cast<double>(cross_entropy(flat, batch.token_labels, ignore).item()) *
                    static_cast<double>(valid);
        loss_positions += valid;
        std::vector<int> rows = detail::argmax_rows(flat.value(), n * s, labels.size());
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<std::string> gold, pred;
            for (std::size_t c = 0; c < s; ++c) {
                const int y = batch.token_labels[r * s + c];
                if (y == ignore) continue;
                const int p = rows[r * s + c];
                gold.push_back(labels.name(y));
                pred.push_back(labels.name(p));
                if (p == y) ++correct;
                ++counted;
            }
            gold_tags.push_back(std::move(gold));
            pred_tags.push_back(std::move(pred));
        }
    }
    TokenEvalResult out;
    out.loss = loss_sum / static_cast<double>(loss_positions);
    out.ner = ner_score(gold_tags, pred_tags);
    out.token_accuracy = counted == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(counted);
    return out;
}

// Entity-level micro F1 with greedy per-token decoding and BIO repair on the
// predictions.
template <typename Real>
NerScore evaluate_ner(const DecoderStack<Real>& model, const TokenHead<Real>& head,
                      const std::vector<TokenExample>& data, const Vocabulary& vocab,
                      const LabelSpace& labels, std::size_t batch_size = 8, std::size_t max_len = 64) {
    if (!is_bio_label_space(labels)) {
        throw ConfigError("evaluate_ner: label space is not BIO (expected O / B-X / I-X names)");
    }
    return evaluate_token_full(model, head, data, vocab, labels, batch_size, max_len).ner;
}

// ---------------------------------------------------------------------------
// Training entry points
// ---------------------------------------------------------------------------

template <typename Real>
TrainOutput train_sequence(DecoderStack<Real>& model, SequenceHead<Real>& head,
                           const std::vector<SequenceExample>& train_data,
                           const std::vector<SequenceExample>& eval_data, const Vocabulary& vocab,
                           const LabelSpace& labels, const TrainConfig& cfg, std::size_t max_len) {
    auto params = detail::training_parameters(model, head.proj, cfg);
    auto make_loss = [&](std::span<const std::size_t> indices, const ForwardCtx& ctx) {
        std::vector<SequenceExample> rows = detail::gather(train_data, indices);
        LabeledBatch batch = collate_sequence(rows, vocab, labels, max_len);
        Tensor<Real> h = model.forward(batch.tokens, batch.pad, ctx);
        Tensor<Real> logits = sequence_logits(h, batch.pad, head);
        return cross_entropy(logits, batch.sequence_labels, labels.ignore_index());
    };
    auto evaluate = [&] {
        return evaluate_sequence_full(model, head, eval_data, vocab, labels, cfg.batch_size, max_len);
    };
    return detail::run_training<Real>(train_data.size(), std::move(params), cfg, make_loss, evaluate,
                                      !eval_data.empty());
}

template <typename Real>
TrainOutput train_token(DecoderStack<Real>& model, TokenHead<Real>& head,
                        const std::vector<TokenExample>& train_data,
                        const std::vector<TokenExample>& eval_data, const Vocabulary& vocab,
                        const LabelSpace& labels, const TrainConfig& cfg, std::size_t max_len) {
    auto params = detail::training_parameters(model, head.proj, cfg);
    auto make_loss = [&](std::span<const std::size_t> indices, const ForwardCtx& ctx) {
        std::vector<TokenExample> rows = detail::gather(train_data, indices);
        LabeledBatch batch = collate_token(rows, vocab, labels, max_len);
        Tensor<Real> h = model.forward(batch.tokens, batch.pad, ctx);
        Tensor<Real> logits = token_logits(h, head);
        Tensor<Real> flat = reshape(logits, {batch.tokens.rows * batch.tokens.cols, labels.size()});
        return cross_entropy(flat, batch.token_labels, labels.ignore_index());
    };
    auto evaluate = [&]() -> EvalResult {
        TokenEvalResult r =
            evaluate_token_full(model, head, eval_data, vocab, labels, cfg.batch_size, max_len);
        return EvalResult{r.loss, r.ner.f1};
    };
    return detail::run_training<Real>(train_data.size(), std::move(params), cfg, make_loss, evaluate,
                                      !eval_data.empty());
}

}  // namespace lsc
