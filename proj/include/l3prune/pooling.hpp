#pragma once

// Weighted mean pooling with linear position weights: the t-th kept token of
// a sequence gets weight t / (1 + 2 + ... + L). Instruction tokens and padding
// are removed before ranking, so they take no weight mass.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/numeric.hpp"

namespace l3p {

struct PoolingMask {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<bool> keep;  // [batch * seq]
    std::vector<std::size_t> rank;  // 1-based rank among kept tokens, 0 where dropped

    // Marks positions [instruction_len, length) of each row as kept.
    static PoolingMask build(std::span<const std::size_t> lengths, std::span<const std::size_t> instruction_lens,
                             std::size_t seq) {
        if (lengths.size() != instruction_lens.size()) {
            throw ShapeError("pooling mask: lengths and instruction lengths differ in count");
        }
        PoolingMask m;
        m.batch = lengths.size();
        m.seq = seq;
        m.keep.assign(m.batch * seq, false);
        m.rank.assign(m.batch * seq, 0);
        for (std::size_t b = 0; b < m.batch; ++b) {
            if (lengths[b] > seq) throw ShapeError("pooling mask: sequence longer than padded length");
            if (instruction_lens[b] >= lengths[b]) {
                throw DataError("sequence " + std::to_string(b) + " has no tokens left to pool after the instruction");
            }
            std::size_t t = 0;
            for (std::size_t s = instruction_lens[b]; s < lengths[b]; ++s) {
                m.keep[b * seq + s] = true;
                m.rank[b * seq + s] = ++t;
            }
        }
        return m;
    }

    static PoolingMask for_batch(const TokenBatch& batch, std::span<const std::size_t> instruction_lens) {
        std::vector<std::size_t> lengths;
        std::size_t seq = 0;
        for (const TokenSeq& s : batch) {
            lengths.push_back(s.size());
            seq = std::max(seq, s.size());
        }
        return build(lengths, instruction_lens, seq);
    }

    // Normalized weights [batch, seq]; each row sums to 1.
    Tensor weights() const {
        Tensor w(Shape{batch, seq});
        for (std::size_t b = 0; b < batch; ++b) {
            std::size_t kept = 0;
            for (std::size_t s = 0; s < seq; ++s) kept += keep[b * seq + s] ? 1 : 0;
            if (kept == 0) throw DataError("all positions of sequence " + std::to_string(b) + " are masked");
            const double total = static_cast<double>(kept * (kept + 1) / 2);
            for (std::size_t s = 0; s < seq; ++s) {
                if (keep[b * seq + s]) w[b * seq + s] = static_cast<double>(rank[b * seq + s]) / total;
            }
        }
        return w;
    }
};

inline Var weighted_mean_pool(Var hidden, const PoolingMask& mask) {
    const Tensor& h = hidden.value();
    if (h.rank() != 3 || h.dim(0) != mask.batch || h.dim(1) != mask.seq) {
        throw ShapeError("weighted_mean_pool: hidden " + shape_str(h.shape()) + " vs mask [" +
                         std::to_string(mask.batch) + ", " + std::to_string(mask.seq) + "]");
    }
    return weighted_sum_seq(hidden, mask.weights());
}

inline Tensor weighted_mean_pool(const Tensor& hidden, const PoolingMask& mask) {
    Graph g;
    return weighted_mean_pool(g.constant(hidden), mask).value();
}

namespace detail {

inline std::size_t resolve_layer(const ModelConfig& c, std::optional<std::size_t> layer) {
    const std::size_t l = layer.value_or(c.n_layers);
    if (l < 1 || l > c.n_layers) {
        throw UsageError("layer " + std::to_string(l) + " out of range [1, " + std::to_string(c.n_layers) + "]");
    }
    return l;
}

}  // namespace detail

// Pooled embedding of `layer` (1-based, default last) recorded on `g`.
template <typename Model>
Var embed(Graph& g, Model& model, const TokenBatch& tokens, std::span<const std::size_t> instruction_lens,
          std::optional<std::size_t> layer = std::nullopt, ForwardOptions opt = {}) {
    const std::size_t l = detail::resolve_layer(model.config, layer);
    const PoolingMask mask = PoolingMask::for_batch(tokens, instruction_lens);
    opt.max_layers = std::min(opt.max_layers, l);
    std::vector<Var> states = forward_all(g, model, tokens, opt);
    return weighted_mean_pool(states[l], mask);
}

inline Tensor embed(const Transformer& model, const TokenBatch& tokens, std::span<const std::size_t> instruction_lens,
                    std::optional<std::size_t> layer = std::nullopt, const ForwardOptions& opt = {}) {
    Graph g;
    return embed(g, model, tokens, instruction_lens, layer, opt).value();
}

inline Tensor embed(const Transformer& model, const TokenBatch& tokens, std::size_t instruction_len,
                    std::optional<std::size_t> layer = std::nullopt, const ForwardOptions& opt = {}) {
    const std::vector<std::size_t> lens(tokens.size(), instruction_len);
    return embed(model, tokens, lens, layer, opt);
}

}  // namespace l3p
