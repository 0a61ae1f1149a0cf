#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "l3prune/l3prune.hpp"

namespace l3p::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = rng.normal(0.0, sd);
    return t;
}

inline ModelConfig tiny_config(std::size_t layers = 3, std::uint64_t seed = 1, std::size_t vocab = 40) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_ff = 12;
    c.max_seq_len = 16;
    c.seed = seed;
    return c;
}

inline TokenBatch random_batch(Rng& rng, std::size_t n, std::size_t vocab, std::size_t min_len, std::size_t max_len) {
    TokenBatch b(n);
    for (auto& s : b) {
        s.resize(min_len + rng.below(max_len - min_len + 1));
        for (auto& id : s) id = 2 + rng.below(vocab - 2);
    }
    return b;
}

// Weighted sum of an op's output with random coefficients, so every output
// element contributes to the scalar.
inline Var probe(Var out, Var coeffs) { return sum(mul(out, coeffs)); }

using ScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;

// Central finite differences against the tape gradient; returns the worst
// norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
// over the inputs.
inline double gradient_check(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Var> vars;
        for (auto& t : inputs) {
            Tensor c = t;
            c.set_requires_grad(true);
            vars.push_back(g.input(std::move(c)));
        }
        Var loss = f(g, vars);
        g.backward(loss);
        for (std::size_t i = 0; i < vars.size(); ++i) {
            auto gr = g.grad(vars[i]);
            analytic.push_back(gr ? *gr : Tensor(inputs[i].shape()));
        }
    }
    auto eval = [&](const std::vector<Tensor>& in) {
        Graph g;
        std::vector<Var> vars;
        for (const auto& t : in) vars.push_back(g.input(t));
        return f(g, vars).value().item();
    };
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            const double x0 = inputs[i][k];
            inputs[i][k] = x0 + h;
            const double up = eval(inputs);
            inputs[i][k] = x0 - h;
            const double down = eval(inputs);
            inputs[i][k] = x0;
            const double num = (up - down) / (2 * h);
            const double an = analytic[i][k];
            diff2 += (an - num) * (an - num);
            a2 += an * an;
            n2 += num * num;
        }
        const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
        worst = std::max(worst, std::sqrt(diff2) / denom);
    }
    return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("l3p_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace l3p::test

namespace l3p::test {

// Random tuple batch over a small vocabulary; some tuples symmetric.
inline std::vector<ContrastiveTuple> random_tuples(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<ContrastiveTuple> out(n);
    auto seq = [&](std::size_t lo, std::size_t hi) {
        TokenSeq s(lo + rng.below(hi - lo + 1));
        for (auto& id : s) id = 2 + rng.below(vocab - 2);
        return s;
    };
    for (auto& t : out) {
        t.instruction = seq(0, 2);
        t.query = seq(1, 4);
        t.positive = seq(1, 4);
        t.hard_negative = seq(1, 4);
        t.symmetric = rng.uniform() < 0.3;
        t.task_id = t.symmetric ? "sym" : "ret";
    }
    return out;
}

// Loss of the full pipeline (embed -> pool -> info_nce) with every model
// tensor as a parameter.
inline double pipeline_loss(Transformer& m, const std::vector<ContrastiveTuple>& tuples, double tau, bool backward) {
    std::vector<const ContrastiveTuple*> ptrs;
    for (const auto& t : tuples) ptrs.push_back(&t);
    const TripleTokens tt = triple_tokens(ptrs);
    Graph g;
    Var loss = triple_loss(embed(g, m, tt.tokens, tt.instruction_lens), tt.count, tau);
    if (backward) g.backward(loss);
    return loss.value().item();
}

// Worst per-tensor norm-wise relative error between tape gradients and
// central differences for one random configuration.
inline double pipeline_gradient_error(std::uint64_t seed, double h = 1e-5) {
    Rng rng(seed);
    ModelConfig c;
    c.vocab_size = 12 + rng.below(8);
    c.n_heads = 1 + rng.below(2);
    c.d_model = 2 * c.n_heads * (1 + rng.below(2));
    c.n_layers = 1 + rng.below(3);
    c.d_ff = 3 + rng.below(5);
    c.max_seq_len = 8;
    c.seed = seed;
    Transformer m = init_model(c);
    // Larger weights than the 0.02 init so every path carries signal.
    for (auto& [name, t] : m.named_parameters()) {
        for (double& x : t->data()) x = t->rank() == 1 ? 1.0 + 0.3 * rng.normal() : 0.5 * rng.normal();
    }
    const auto tuples = random_tuples(rng, 2 + rng.below(2), c.vocab_size);
    const double tau = 0.2 + 0.8 * rng.uniform();

    for (auto& [name, t] : m.named_parameters()) t->set_requires_grad(true);
    pipeline_loss(m, tuples, tau, true);
    double worst = 0.0;
    for (auto& [name, t] : m.named_parameters()) {
        const std::vector<double> analytic = t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                                           : std::vector<double>(t->size(), 0.0);
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t k = 0; k < t->size(); ++k) {
            const double x0 = (*t)[k];
            (*t)[k] = x0 + h;
            const double up = pipeline_loss(m, tuples, tau, false);
            (*t)[k] = x0 - h;
            const double down = pipeline_loss(m, tuples, tau, false);
            (*t)[k] = x0;
            const double num = (up - down) / (2 * h);
            diff2 += (analytic[k] - num) * (analytic[k] - num);
            a2 += analytic[k] * analytic[k];
            n2 += num * num;
        }
        if (a2 == 0.0 && n2 == 0.0) continue;
        worst = std::max(worst, std::sqrt(diff2) / std::sqrt(std::max(a2, n2)));
    }
    return worst;
}

}  // namespace l3p::test
