#pragma once

// Temperature-scaled cosine InfoNCE. Each query scores against every
// positive and every hard negative in the batch (2B candidates); the target
// is its own positive.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "l3prune/data.hpp"
#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/numeric.hpp"
#include "l3prune/pooling.hpp"

namespace l3p {

inline constexpr double kDefaultTemperature = 0.05;

struct ContrastiveBatch {
    Tensor queries;  // [B, d]
    Tensor positives;  // [B, d]
    Tensor hard_negatives;  // [B, d]
    double temperature = kDefaultTemperature;
};

inline Var info_nce(Var queries, Var positives, Var hard_negatives, double temperature) {
    if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
    const Shape& qs = queries.shape();
    if (qs.size() != 2 || qs[0] == 0 || positives.shape() != qs || hard_negatives.shape() != qs) {
        throw ShapeError("info_nce: queries " + shape_str(qs) + ", positives " + shape_str(positives.shape()) +
                         ", negatives " + shape_str(hard_negatives.shape()));
    }
    const std::size_t b = qs[0];
    Var q = l2_normalize_rows(queries);
    Var candidates = concat_rows(l2_normalize_rows(positives), l2_normalize_rows(hard_negatives));
    Var logits = scale(linear(q, candidates), 1.0 / temperature);
    std::vector<std::size_t> targets(b);
    std::iota(targets.begin(), targets.end(), std::size_t{0});
    return cross_entropy(logits, std::move(targets));
}

inline double info_nce(const ContrastiveBatch& batch) {
    Graph g;
    return info_nce(g.constant(batch.queries), g.constant(batch.positives), g.constant(batch.hard_negatives),
                    batch.temperature)
        .value()
        .item();
}

// The 3B sequences of a tuple batch in one token batch: queries, then
// positives, then negatives, with their instruction lengths.
struct TripleTokens {
    TokenBatch tokens;
    std::vector<std::size_t> instruction_lens;
    std::size_t count = 0;
};

inline TripleTokens triple_tokens(std::span<const ContrastiveTuple* const> tuples) {
    TripleTokens out;
    out.count = tuples.size();
    for (const auto* t : tuples) {
        out.tokens.push_back(t->query_tokens());
        out.instruction_lens.push_back(t->instruction.size());
    }
    for (const auto* t : tuples) {
        out.tokens.push_back(t->positive_tokens());
        out.instruction_lens.push_back(t->doc_instruction_len());
    }
    for (const auto* t : tuples) {
        out.tokens.push_back(t->negative_tokens());
        out.instruction_lens.push_back(t->doc_instruction_len());
    }
    return out;
}

// Loss on pooled [3B, d] rows laid out as in TripleTokens.
inline Var triple_loss(Var pooled, std::size_t b, double temperature) {
    return info_nce(slice_rows(pooled, 0, b), slice_rows(pooled, b, 2 * b), slice_rows(pooled, 2 * b, 3 * b),
                    temperature);
}

struct LossOptions {
    std::size_t batch_size = 32;
    double temperature = kDefaultTemperature;
};

// Mean over consecutive batches of the contrastive loss at `layer`, with one
// (truncated) forward pass per batch. No gradients are kept.
inline double layer_loss(const Transformer& model, std::span<const ContrastiveTuple> tuples, std::size_t layer,
                         const LossOptions& opt = {}, ForwardStats* stats = nullptr) {
    if (tuples.empty()) throw DataError("layer_loss on an empty tuple set");
    if (opt.batch_size == 0) throw UsageError("batch size must be positive");
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < tuples.size(); start += opt.batch_size) {
        const std::size_t end = std::min(tuples.size(), start + opt.batch_size);
        std::vector<const ContrastiveTuple*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&tuples[i]);
        const TripleTokens tt = triple_tokens(ptrs);
        Graph g;
        ForwardOptions fo;
        fo.stats = stats;
        Var pooled = embed(g, model, tt.tokens, tt.instruction_lens, layer, fo);
        total += triple_loss(pooled, tt.count, opt.temperature).value().item();
        ++batches;
    }
    return total / static_cast<double>(batches);
}

}  // namespace l3p
