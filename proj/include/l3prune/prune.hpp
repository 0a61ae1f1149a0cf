#pragma once

// Depth pruning: keep the first n* blocks verbatim and drop the rest. The
// final norm and embedding are kept, nothing is re-initialized.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "l3prune/error.hpp"
#include "l3prune/model.hpp"

namespace l3p {

struct PrunePercent {
    double p;
};
struct PruneLayers {
    std::size_t k;
};

struct PruneSpec {
    std::variant<PrunePercent, PruneLayers> mode;
    std::string provenance;
};

struct PruneReport {
    double percent = 0.0;  // p, or the layer fraction removed for explicit k
    std::size_t layers_before = 0;
    std::size_t layers_after = 0;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    std::string provenance;

    double percent_params_kept() const {
        return 100.0 * static_cast<double>(params_after) / static_cast<double>(params_before);
    }

    static std::string csv_header() { return "p,layers_before,layers_after,params_before,params_after,percent_kept"; }

    std::string csv_row() const {
        std::ostringstream os;
        os << std::setprecision(6) << percent << ',' << layers_before << ',' << layers_after << ','
           << params_before << ',' << params_after << ',' << std::fixed << std::setprecision(4)
           << percent_params_kept();
        return os.str();
    }
};

// n* = floor(n * (1 - p)), rejecting p outside [0, 1) and n* < 1. Percents
// arrive as decimals (0.05, 0.1, ...) that binary floating point cannot hold
// exactly, so products within 1e-9 below an integer count as that integer.
inline std::size_t pruned_layer_count(std::size_t n, double p) {
    if (!(p >= 0.0 && p < 1.0)) throw UsageError("prune percent must be in [0, 1), got " + std::to_string(p));
    const auto kept = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - p) + 1e-9));
    if (kept < 1) {
        throw UsageError("pruning " + std::to_string(n) + " layers by " + std::to_string(p) + " leaves no layers");
    }
    return kept;
}

inline std::size_t resolve_prune_target(std::size_t n, const PruneSpec& spec) {
    if (const auto* pp = std::get_if<PrunePercent>(&spec.mode)) return pruned_layer_count(n, pp->p);
    const std::size_t k = std::get<PruneLayers>(spec.mode).k;
    if (k < 1 || k > n) {
        throw UsageError("layer count " + std::to_string(k) + " out of range [1, " + std::to_string(n) + "]");
    }
    return k;
}

inline std::pair<Transformer, PruneReport> prune_layers(const Transformer& model, const PruneSpec& spec) {
    const std::size_t n = model.config.n_layers;
    const std::size_t kept = resolve_prune_target(n, spec);

    Transformer out;
    out.config = model.config;
    out.config.n_layers = kept;
    out.token_embedding = model.token_embedding;
    out.layers.assign(model.layers.begin(), model.layers.begin() + static_cast<std::ptrdiff_t>(kept));
    out.final_norm = model.final_norm;

    PruneReport report;
    if (const auto* pp = std::get_if<PrunePercent>(&spec.mode)) {
        report.percent = pp->p;
    } else {
        report.percent = 1.0 - static_cast<double>(kept) / static_cast<double>(n);
    }
    report.layers_before = n;
    report.layers_after = kept;
    report.params_before = count_params(model);
    report.params_after = count_params(out);
    report.provenance = spec.provenance;
    return {std::move(out), std::move(report)};
}

// One report per percentage, ordered by p.
inline std::vector<PruneReport> sweep(const Transformer& model, std::vector<double> percents) {
    std::sort(percents.begin(), percents.end());
    std::vector<PruneReport> out;
    out.reserve(percents.size());
    for (double p : percents) out.push_back(prune_layers(model, PruneSpec{PrunePercent{p}, "sweep"}).second);
    return out;
}

}  // namespace l3p
