#pragma once

// Layerwise loss profiling and two-minima prune point selection.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "l3prune/data.hpp"
#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/objective.hpp"
#include "l3prune/pooling.hpp"
#include "l3prune/prune.hpp"
#include "l3prune/rng.hpp"

namespace l3p {

inline constexpr std::size_t kDefaultProfileSamples = 256;
inline constexpr std::size_t kDefaultProfileBatch = 32;

struct LayerLossProfile {
    std::vector<double> losses;  // losses[l - 1] is layer l
    std::size_t sample_count = 0;
    std::size_t batch_size = kDefaultProfileBatch;
    std::uint64_t seed = 0;

    std::size_t n_layers() const { return losses.size(); }
    double at_layer(std::size_t layer) const { return losses.at(layer - 1); }

    std::string to_csv() const {
        std::ostringstream os;
        os << "layer,loss\n" << std::setprecision(17);
        for (std::size_t i = 0; i < losses.size(); ++i) os << (i + 1) << ',' << losses[i] << '\n';
        return os.str();
    }
};

struct L3Selection {
    std::size_t small_layer = 0;
    std::size_t large_layer = 0;
    std::size_t midpoint = 0;

    std::string to_text() const {
        std::ostringstream os;
        os << "small_layer=" << small_layer << "\nlarge_layer=" << large_layer << "\nmidpoint=" << midpoint << '\n';
        return os.str();
    }

    static L3Selection from_text(const std::string& text) {
        L3Selection s;
        std::istringstream is(text);
        std::string line;
        bool seen[3] = {false, false, false};
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq);
            std::size_t value = 0;
            try {
                value = std::stoul(line.substr(eq + 1));
            } catch (const std::exception&) {
                throw DataError("selection: bad value in line '" + line + "'");
            }
            if (key == "small_layer") s.small_layer = value, seen[0] = true;
            if (key == "large_layer") s.large_layer = value, seen[1] = true;
            if (key == "midpoint") s.midpoint = value, seen[2] = true;
        }
        if (!seen[0] || !seen[1] || !seen[2]) throw DataError("selection: missing small_layer/large_layer/midpoint");
        return s;
    }

    friend bool operator==(const L3Selection&, const L3Selection&) = default;
};

// The tuples a profile with this seed evaluates, in batch order.
inline std::vector<ContrastiveTuple> sample_tuples(const std::vector<ContrastiveTuple>& dataset, std::size_t count,
                                                   std::uint64_t seed) {
    if (dataset.empty()) throw DataError("cannot profile on an empty dataset");
    if (count < 1 || count > dataset.size()) {
        throw UsageError("sample count " + std::to_string(count) + " must be in [1, " +
                         std::to_string(dataset.size()) + "]");
    }
    Rng rng(seed);
    const auto order = rng.permutation(dataset.size());
    std::vector<ContrastiveTuple> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(dataset[order[i]]);
    return out;
}

struct ProfileOptions {
    std::size_t sample_count = kDefaultProfileSamples;
    std::size_t batch_size = kDefaultProfileBatch;
    double temperature = kDefaultTemperature;
    std::uint64_t seed = 0;
};

// Zero-shot contrastive loss of every layer's pooled output. Each batch runs
// one forward pass and scores all layers from its hidden states.
inline LayerLossProfile profile(const Transformer& model, const std::vector<ContrastiveTuple>& dataset,
                                const ProfileOptions& opt, ForwardStats* stats = nullptr) {
    if (opt.batch_size == 0) throw UsageError("batch size must be positive");
    const auto sampled = sample_tuples(dataset, opt.sample_count, opt.seed);
    const std::size_t n = model.config.n_layers;
    std::vector<double> sums(n, 0.0);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < sampled.size(); start += opt.batch_size) {
        const std::size_t end = std::min(sampled.size(), start + opt.batch_size);
        std::vector<const ContrastiveTuple*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&sampled[i]);
        const TripleTokens tt = triple_tokens(ptrs);
        const PoolingMask mask = PoolingMask::for_batch(tt.tokens, tt.instruction_lens);
        Graph g;
        ForwardOptions fo;
        fo.stats = stats;
        const std::vector<Var> states = forward_all(g, model, tt.tokens, fo);
        for (std::size_t l = 1; l <= n; ++l) {
            Var pooled = weighted_mean_pool(states[l], mask);
            sums[l - 1] += triple_loss(pooled, tt.count, opt.temperature).value().item();
        }
        ++batches;
    }
    LayerLossProfile out;
    out.losses.resize(n);
    for (std::size_t l = 0; l < n; ++l) out.losses[l] = sums[l] / static_cast<double>(batches);
    out.sample_count = opt.sample_count;
    out.batch_size = opt.batch_size;
    out.seed = opt.seed;
    return out;
}

// Loss minima before and after floor(n/2); the first half includes the
// midpoint layer and ties go to the smaller layer.
inline L3Selection l3prune_select(const std::vector<double>& losses) {
    const std::size_t n = losses.size();
    if (n < 2) throw UsageError("selection needs at least 2 layers, got " + std::to_string(n));
    L3Selection s;
    s.midpoint = n / 2;
    auto argmin = [&](std::size_t first, std::size_t last) {
        std::size_t best = first;
        for (std::size_t l = first + 1; l <= last; ++l) {
            if (losses[l - 1] < losses[best - 1]) best = l;
        }
        return best;
    };
    s.small_layer = argmin(1, s.midpoint);
    s.large_layer = argmin(s.midpoint + 1, n);
    return s;
}

inline L3Selection l3prune_select(const LayerLossProfile& profile) { return l3prune_select(profile.losses); }

struct Variant {
    Transformer model;
    PruneReport report;
};

struct Variants {
    Variant large;
    Variant small;
};

inline Variants make_variants(const Transformer& model, const L3Selection& selection) {
    const std::size_t n = model.config.n_layers;
    if (!(selection.small_layer >= 1 && selection.small_layer <= selection.midpoint &&
          selection.midpoint < selection.large_layer && selection.large_layer <= n)) {
        throw UsageError("selection (small " + std::to_string(selection.small_layer) + ", large " +
                         std::to_string(selection.large_layer) + ") is not valid for a " + std::to_string(n) +
                         "-layer model");
    }
    auto [large, large_report] = prune_layers(model, PruneSpec{PruneLayers{selection.large_layer}, "l3prune-large"});
    auto [small, small_report] = prune_layers(model, PruneSpec{PruneLayers{selection.small_layer}, "l3prune-small"});
    return Variants{Variant{std::move(large), std::move(large_report)},
                    Variant{std::move(small), std::move(small_report)}};
}

}  // namespace l3p
