#pragma once

// Low-rank adapters on the projection matrices and the contrastive training
// loop. Base weights stay frozen; only the adapter factors are optimized.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l3prune/data.hpp"
#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/numeric.hpp"
#include "l3prune/objective.hpp"
#include "l3prune/pooling.hpp"
#include "l3prune/rng.hpp"

namespace l3p {

struct LoraAdapter {
    std::size_t layer = 0;
    std::string target;  // projection short name, e.g. "wq"
    Tensor a;  // [r, d_in]
    Tensor b;  // [d_out, r]
    std::size_t rank = 0;
    double alpha = 0.0;

    double scaling() const { return alpha / static_cast<double>(rank); }
    std::size_t param_count() const { return a.size() + b.size(); }
    std::string name() const { return "layers." + std::to_string(layer) + "." + target; }
};

class AdaptedModel {
public:
    AdaptedModel(Transformer base, std::vector<LoraAdapter> adapters)
        : base_(std::move(base)), adapters_(std::move(adapters)) {
        for (std::size_t i = 0; i < adapters_.size(); ++i) {
            index_[{adapters_[i].layer, adapters_[i].target}] = i;
        }
    }

    const Transformer& base() const { return base_; }
    const ModelConfig& config() const { return base_.config; }
    std::vector<LoraAdapter>& adapters() { return adapters_; }
    const std::vector<LoraAdapter>& adapters() const { return adapters_; }
    bool consumed() const { return consumed_; }

    std::size_t adapter_param_count() const {
        std::size_t n = 0;
        for (const auto& a : adapters_) n += a.param_count();
        return n;
    }

    // Adds scaling * (x A^T) B^T to each adapted projection. With trainable
    // set, A and B enter the graph as parameters.
    ProjectionHook hook(bool trainable) {
        if (consumed_) throw UsageError("adapters were already merged");
        return [this, trainable](Graph& g, const ProjectionSite& site, Var x, Var y) -> Var {
            auto it = index_.find({site.layer, std::string(site.name)});
            if (it == index_.end()) return y;
            LoraAdapter& ad = adapters_[it->second];
            Var a = trainable ? g.param(ad.a) : g.constant(ad.a);
            Var b = trainable ? g.param(ad.b) : g.constant(ad.b);
            return add(y, scale(linear(linear(x, a), b), ad.scaling()));
        };
    }

    // Inference embedding through the adapted model.
    Tensor embed(const TokenBatch& tokens, std::span<const std::size_t> instruction_lens,
                 std::optional<std::size_t> layer = std::nullopt) {
        Graph g;
        ForwardOptions fo;
        fo.hook = hook(false);
        return l3p::embed(g, base_, tokens, instruction_lens, layer, fo).value();
    }

    void mark_consumed() { consumed_ = true; }

private:
    Transformer base_;
    std::vector<LoraAdapter> adapters_;
    std::map<std::pair<std::size_t, std::string>, std::size_t> index_;
    bool consumed_ = false;
};

inline std::vector<std::string> default_lora_targets() {
    return {std::begin(kProjectionNames), std::end(kProjectionNames)};
}

// Targets are short projection names ("wq") applied to every layer, or full
// names ("layers.2.wq") for one layer. A ~ N(0, 1/d_in), B = 0.
inline AdaptedModel attach_lora(Transformer model, std::size_t rank, double alpha,
                                const std::vector<std::string>& targets, std::uint64_t seed) {
    if (rank == 0) throw UsageError("LoRA rank must be positive");
    if (!(alpha > 0.0)) throw UsageError("LoRA alpha must be positive");
    std::map<std::pair<std::size_t, std::string>, bool> wanted;
    for (const std::string& t : targets) {
        bool matched = false;
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            for (std::string_view p : kProjectionNames) {
                const std::string full = "layers." + std::to_string(l) + "." + std::string(p);
                if (t == p || t == full) {
                    wanted[{l, std::string(p)}] = true;
                    matched = true;
                }
            }
        }
        if (!matched) throw UsageError("unknown LoRA target " + t);
    }

    Rng rng(seed);
    std::vector<LoraAdapter> adapters;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        for (auto [name, w] : Block::projections(model.layers[l])) {
            if (!wanted.contains({l, std::string(name)})) continue;
            const std::size_t d_out = w->dim(0), d_in = w->dim(1);
            LoraAdapter ad;
            ad.layer = l;
            ad.target = std::string(name);
            ad.rank = rank;
            ad.alpha = alpha;
            ad.a = Tensor(Shape{rank, d_in});
            const double std_a = 1.0 / std::sqrt(static_cast<double>(d_in));
            for (double& x : ad.a.data()) x = rng.normal(0.0, std_a);
            ad.b = Tensor(Shape{d_out, rank});
            ad.a.set_requires_grad(true);
            ad.b.set_requires_grad(true);
            adapters.push_back(std::move(ad));
        }
    }
    return AdaptedModel(std::move(model), std::move(adapters));
}

// Folds W + scaling * B A into a plain model. The adapters are consumed.
inline Transformer merge(AdaptedModel& adapted) {
    if (adapted.consumed()) throw UsageError("adapters were already merged");
    Transformer out = adapted.base();
    for (const LoraAdapter& ad : adapted.adapters()) {
        Tensor* w = nullptr;
        for (auto [name, t] : Block::projections(out.layers.at(ad.layer))) {
            if (name == ad.target) w = t;
        }
        const std::size_t d_out = w->dim(0), d_in = w->dim(1), r = ad.rank;
        const double s = ad.scaling();
        for (std::size_t o = 0; o < d_out; ++o)
            for (std::size_t i = 0; i < d_in; ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < r; ++k) acc += ad.b[o * r + k] * ad.a[k * d_in + i];
                (*w)[o * d_in + i] += s * acc;
            }
    }
    adapted.mark_consumed();
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::size_t warmup_steps = 90;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
    double temperature = kDefaultTemperature;
    std::uint64_t seed = 0;
    std::vector<std::string> targets = default_lora_targets();

    static TrainConfig desk() { return TrainConfig{}; }

    // Recipe used for the 4-8B models: 1000 steps, batch 64, lr 2e-4 with 300
    // warm-up steps, rank 16.
    static TrainConfig paper() {
        TrainConfig c;
        c.steps = 1000;
        c.batch_size = 64;
        c.lr = 2e-4;
        c.warmup_steps = 300;
        c.lora_rank = 16;
        c.lora_alpha = 32.0;
        return c;
    }

    void validate() const {
        if (batch_size == 0) throw UsageError("batch_size must be positive");
        if (!(lr > 0.0)) throw UsageError("lr must be positive");
        if (warmup_steps > steps) throw UsageError("warmup_steps exceeds steps");
        if (lora_rank == 0) throw UsageError("lora_rank must be positive");
        if (!(lora_alpha > 0.0)) throw UsageError("lora_alpha must be positive");
        if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
    }

    // Linear ramp over the warm-up steps (1-based), constant afterwards.
    double lr_at(std::size_t step) const {
        if (warmup_steps == 0 || step >= warmup_steps) return lr;
        return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::setprecision(17) << "steps=" << steps << "\nbatch_size=" << batch_size << "\nlr=" << lr
           << "\nwarmup_steps=" << warmup_steps << "\nlora_rank=" << lora_rank << "\nlora_alpha=" << lora_alpha
           << "\ntemperature=" << temperature << "\nseed=" << seed << "\ntargets=";
        for (std::size_t i = 0; i < targets.size(); ++i) os << (i ? "," : "") << targets[i];
        os << '\n';
        return os.str();
    }
};

struct TrainPoint {
    std::size_t step;
    double loss;
    double wall_ms;
};

struct TrainCurve {
    std::vector<TrainPoint> points;

    double total_ms() const { return points.empty() ? 0.0 : points.back().wall_ms; }

    // Mean loss over the last `window` steps.
    double tail_mean(std::size_t window) const {
        if (points.empty()) return 0.0;
        const std::size_t n = std::min(window, points.size());
        double s = 0.0;
        for (std::size_t i = points.size() - n; i < points.size(); ++i) s += points[i].loss;
        return s / static_cast<double>(n);
    }
    double head_mean(std::size_t window) const {
        if (points.empty()) return 0.0;
        const std::size_t n = std::min(window, points.size());
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += points[i].loss;
        return s / static_cast<double>(n);
    }

    // Loss column only; wall-clock time is kept out of the CSV so reruns
    // produce identical bytes.
    std::string to_csv() const {
        std::ostringstream os;
        os << "step,loss\n" << std::setprecision(17);
        for (const auto& p : points) os << p.step << ',' << p.loss << '\n';
        return os.str();
    }
};

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor*> params, double lr) {
        ++t_;
        if (m_.empty()) {
            for (Tensor* p : params) {
                m_.emplace_back(p->size(), 0.0);
                v_.emplace_back(p->size(), 0.0);
            }
        }
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
                v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Contrastive training of the adapter factors. Each step embeds the batch's
// queries, positives and hard negatives in one pass.
inline TrainCurve train(AdaptedModel& model, const std::vector<ContrastiveTuple>& dataset, const TrainConfig& config) {
    config.validate();
    if (dataset.empty()) throw DataError("training dataset is empty");
    TrainCurve curve;
    if (config.steps == 0) return curve;

    TupleSampler sampler(dataset, config.seed);
    Adam adam;
    std::vector<Tensor*> params;
    for (LoraAdapter& ad : model.adapters()) {
        params.push_back(&ad.a);
        params.push_back(&ad.b);
    }
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 1; step <= config.steps; ++step) {
        const std::vector<std::size_t> ids = sampler.next(config.batch_size);
        std::vector<const ContrastiveTuple*> batch;
        for (std::size_t i : ids) batch.push_back(&dataset[i]);
        const TripleTokens tt = triple_tokens(batch);
        double loss_value = 0.0;
        try {
            Graph g;
            ForwardOptions fo;
            fo.hook = model.hook(true);
            Var pooled = embed(g, model.base(), tt.tokens, tt.instruction_lens, std::nullopt, fo);
            Var loss = triple_loss(pooled, tt.count, config.temperature);
            loss_value = loss.value().item();
            g.backward(loss);
            adam.step(params, config.lr_at(step));
            for (Tensor* p : params) {
                if (p->has_grad() && !p->all_finite()) throw NumericError("non-finite adapter weight");
                p->zero_grad();
            }
        } catch (const NumericError& e) {
            std::ostringstream os;
            os << "training diverged at step " << step << " (batch tuples";
            for (std::size_t i : ids) os << ' ' << i;
            os << "): " << e.what();
            throw NumericError(os.str());
        }
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        curve.points.push_back(TrainPoint{step, loss_value, ms});
    }
    return curve;
}

}  // namespace l3p
