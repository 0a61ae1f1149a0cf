#pragma once

// Decoder-only transformer with pre-norm blocks, rotary attention and a gated
// SiLU MLP. Every block adds its attention and MLP outputs onto the residual
// stream, and forward_all() returns the stream after the embedding and after
// each block from a single pass.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "l3prune/error.hpp"
#include "l3prune/numeric.hpp"
#include "l3prune/rng.hpp"

namespace l3p {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr double kInitStd = 0.02;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t d_ff = 0;
    std::size_t max_seq_len = 0;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& msg) { throw UsageError("invalid model config: " + msg); };
        if (vocab_size < 2) fail("vocab_size must be at least 2 (pad and unk are reserved)");
        if (d_model == 0) fail("d_model must be positive");
        if (n_layers == 0) fail("n_layers must be at least 1");
        if (n_heads == 0) fail("n_heads must be positive");
        if (d_model % n_heads != 0) {
            fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                 std::to_string(n_heads));
        }
        if ((d_model / n_heads) % 2 != 0) fail("head dimension must be even for rotary embeddings");
        if (d_ff == 0) fail("d_ff must be positive");
        if (max_seq_len == 0) fail("max_seq_len must be positive");
    }

    std::size_t head_dim() const { return d_model / n_heads; }

    // key=value lines, fixed key order.
    std::string to_text() const {
        std::ostringstream os;
        os << "vocab_size=" << vocab_size << '\n'
           << "d_model=" << d_model << '\n'
           << "n_layers=" << n_layers << '\n'
           << "n_heads=" << n_heads << '\n'
           << "d_ff=" << d_ff << '\n'
           << "max_seq_len=" << max_seq_len << '\n'
           << "seed=" << seed << '\n';
        return os.str();
    }

    static ModelConfig from_text(std::string_view text) {
        std::map<std::string, std::uint64_t, std::less<>> kv;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string_view::npos) end = text.size();
            std::string_view line = text.substr(pos, end - pos);
            pos = end + 1;
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string_view::npos) throw FormatError("config line without '=': " + std::string(line));
            std::uint64_t value = 0;
            std::string_view rhs = line.substr(eq + 1);
            auto [ptr, ec] = std::from_chars(rhs.data(), rhs.data() + rhs.size(), value);
            if (ec != std::errc{} || ptr != rhs.data() + rhs.size()) {
                throw FormatError("config value is not an integer: " + std::string(line));
            }
            kv[std::string(line.substr(0, eq))] = value;
        }
        auto get = [&](std::string_view key) {
            auto it = kv.find(key);
            if (it == kv.end()) throw FormatError("config missing key " + std::string(key));
            return it->second;
        };
        ModelConfig c;
        c.vocab_size = get("vocab_size");
        c.d_model = get("d_model");
        c.n_layers = get("n_layers");
        c.n_heads = get("n_heads");
        c.d_ff = get("d_ff");
        c.max_seq_len = get("max_seq_len");
        c.seed = get("seed");
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Block {
    Tensor attn_norm;  // [d]
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor mlp_norm;  // [d]
    Tensor w_gate, w_up;  // [d_ff, d]
    Tensor w_down;  // [d, d_ff]

    // Projection matrices in canonical order, with their short names.
    template <typename Self>
    static auto projections(Self& b) {
        using T = std::conditional_t<std::is_const_v<Self>, const Tensor, Tensor>;
        return std::vector<std::pair<std::string_view, T*>>{
            {"wq", &b.wq}, {"wk", &b.wk}, {"wv", &b.wv}, {"wo", &b.wo},
            {"w_gate", &b.w_gate}, {"w_up", &b.w_up}, {"w_down", &b.w_down}};
    }

    friend bool operator==(const Block&, const Block&) = default;
};

inline constexpr std::string_view kProjectionNames[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

struct Transformer {
    ModelConfig config;
    Tensor token_embedding;  // [vocab, d]
    std::vector<Block> layers;
    Tensor final_norm;  // [d]

    // Every parameter tensor with its checkpoint name, in file order.
    template <typename Self>
    static auto named(Self& m) {
        using T = std::conditional_t<std::is_const_v<Self>, const Tensor, Tensor>;
        std::vector<std::pair<std::string, T*>> out;
        out.emplace_back("tok_embeddings", &m.token_embedding);
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            auto& b = m.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "attn_norm", &b.attn_norm);
            out.emplace_back(p + "wq", &b.wq);
            out.emplace_back(p + "wk", &b.wk);
            out.emplace_back(p + "wv", &b.wv);
            out.emplace_back(p + "wo", &b.wo);
            out.emplace_back(p + "mlp_norm", &b.mlp_norm);
            out.emplace_back(p + "w_gate", &b.w_gate);
            out.emplace_back(p + "w_up", &b.w_up);
            out.emplace_back(p + "w_down", &b.w_down);
        }
        out.emplace_back("final_norm", &m.final_norm);
        return out;
    }
    auto named_parameters() { return named(*this); }
    auto named_parameters() const { return named(*this); }

    friend bool operator==(const Transformer&, const Transformer&) = default;
};

// Expected shape of every named tensor for a config.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
    std::vector<std::pair<std::string, Shape>> out;
    const std::size_t d = c.d_model, f = c.d_ff;
    out.emplace_back("tok_embeddings", Shape{c.vocab_size, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", Shape{d});
        for (const char* n : {"wq", "wk", "wv", "wo"}) out.emplace_back(p + n, Shape{d, d});
        out.emplace_back(p + "mlp_norm", Shape{d});
        out.emplace_back(p + "w_gate", Shape{f, d});
        out.emplace_back(p + "w_up", Shape{f, d});
        out.emplace_back(p + "w_down", Shape{d, f});
    }
    out.emplace_back("final_norm", Shape{d});
    return out;
}

// Matrices and embeddings ~ N(0, 0.02) from one seeded stream in file order;
// norm gains start at 1.
inline Transformer init_model(const ModelConfig& config) {
    config.validate();
    Transformer m;
    m.config = config;
    m.token_embedding = Tensor(Shape{config.vocab_size, config.d_model});
    m.layers.resize(config.n_layers);
    for (Block& b : m.layers) {
        const std::size_t d = config.d_model, f = config.d_ff;
        b.attn_norm = Tensor(Shape{d}, 1.0);
        b.mlp_norm = Tensor(Shape{d}, 1.0);
        for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo}) *t = Tensor(Shape{d, d});
        b.w_gate = Tensor(Shape{f, d});
        b.w_up = Tensor(Shape{f, d});
        b.w_down = Tensor(Shape{d, f});
    }
    m.final_norm = Tensor(Shape{config.d_model}, 1.0);

    Rng rng(config.seed);
    for (auto& [name, t] : m.named_parameters()) {
        if (t->rank() == 1) continue;
        for (double& x : t->data()) x = rng.normal(0.0, kInitStd);
    }
    return m;
}

struct ParamCount {
    std::size_t embedding = 0;
    std::size_t per_block = 0;
    std::size_t blocks = 0;
    std::size_t norm = 0;

    std::size_t total() const { return embedding + blocks * per_block + norm; }
};

inline ParamCount param_breakdown(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ff;
    return ParamCount{c.vocab_size * d, 2 * d + 4 * d * d + 3 * d * f, c.n_layers, d};
}

inline std::size_t count_params(const Transformer& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : model.named_parameters()) n += t->size();
    return n;
}

// ---------------------------------------------------------------------------
// Forward

using TokenSeq = std::vector<std::size_t>;
using TokenBatch = std::vector<TokenSeq>;

struct HiddenStates {
    // per_layer[0] is the embedding output, per_layer[l] the output of block l.
    // Each entry is [batch, seq, d] with right padding.
    std::vector<Tensor> per_layer;
};

// Counts executed passes; used to check that per-layer states cost one pass.
struct ForwardStats {
    std::size_t passes = 0;
    std::size_t block_evals = 0;
};

struct ProjectionSite {
    std::size_t layer;
    std::string_view name;
};

// Lets adapters add to a projection's output: returns the value that replaces
// base_out. An empty hook leaves the model unchanged.
using ProjectionHook = std::function<Var(Graph&, const ProjectionSite&, Var input, Var base_out)>;

struct ForwardOptions {
    ProjectionHook hook;
    ForwardStats* stats = nullptr;
    // Run only the first `max_layers` blocks when set.
    std::size_t max_layers = static_cast<std::size_t>(-1);
};

namespace detail {

inline Var bind(Graph& g, Tensor& t) { return g.param(t); }
inline Var bind(Graph& g, const Tensor& t) { return g.constant(t); }

// Right-pads with kPadId; returns flat ids and the padded length.
inline std::pair<std::vector<std::size_t>, std::size_t> pad_batch(const TokenBatch& batch,
                                                                   const ModelConfig& c) {
    if (batch.empty()) throw DataError("empty token batch");
    std::size_t seq = 0;
    for (const TokenSeq& s : batch) {
        if (s.empty()) throw DataError("empty token sequence");
        if (s.size() > c.max_seq_len) {
            throw DataError("sequence length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                            std::to_string(c.max_seq_len));
        }
        seq = std::max(seq, s.size());
    }
    std::vector<std::size_t> ids(batch.size() * seq, kPadId);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (std::size_t i = 0; i < batch[b].size(); ++i) {
            if (batch[b][i] >= c.vocab_size) {
                throw DataError("token id " + std::to_string(batch[b][i]) + " out of range for vocab_size " +
                                std::to_string(c.vocab_size));
            }
            ids[b * seq + i] = batch[b][i];
        }
    }
    return {std::move(ids), seq};
}

template <typename Model>
std::vector<Var> forward_impl(Graph& g, Model& model, const TokenBatch& batch, const ForwardOptions& opt) {
    const ModelConfig& c = model.config;
    if (model.layers.size() != c.n_layers) throw NumericError("layer list does not match config.n_layers");
    auto [ids, seq] = pad_batch(batch, c);
    const std::size_t depth = std::min(opt.max_layers, model.layers.size());

    auto project = [&](Var x, auto& w, std::size_t layer, std::string_view name) {
        Var y = linear(x, bind(g, w));
        if (opt.hook) y = opt.hook(g, ProjectionSite{layer, name}, x, y);
        return y;
    };

    std::vector<Var> states;
    states.reserve(depth + 1);
    Var x = embedding(bind(g, model.token_embedding), ids, Shape{batch.size(), seq});
    states.push_back(x);
    for (std::size_t l = 0; l < depth; ++l) {
        auto& b = model.layers[l];
        Var h = rmsnorm(x, bind(g, b.attn_norm));
        Var q = rope(project(h, b.wq, l, "wq"), c.n_heads);
        Var k = rope(project(h, b.wk, l, "wk"), c.n_heads);
        Var v = project(h, b.wv, l, "wv");
        Var att = causal_attention(q, k, v, c.n_heads);
        x = add(x, project(att, b.wo, l, "wo"));

        Var h2 = rmsnorm(x, bind(g, b.mlp_norm));
        Var gate = silu(project(h2, b.w_gate, l, "w_gate"));
        Var up = project(h2, b.w_up, l, "w_up");
        x = add(x, project(mul(gate, up), b.w_down, l, "w_down"));
        states.push_back(x);
    }
    if (opt.stats) {
        opt.stats->passes += 1;
        opt.stats->block_evals += depth;
    }
    return states;
}

}  // namespace detail

// Records one forward pass on `g` and returns the residual stream after the
// embedding and after every block. Passing a mutable model binds its tensors
// as parameters, so those marked requires_grad receive gradients.
inline std::vector<Var> forward_all(Graph& g, const Transformer& model, const TokenBatch& batch,
                                    const ForwardOptions& opt = {}) {
    return detail::forward_impl(g, model, batch, opt);
}
inline std::vector<Var> forward_all(Graph& g, Transformer& model, const TokenBatch& batch,
                                    const ForwardOptions& opt = {}) {
    return detail::forward_impl(g, model, batch, opt);
}

inline HiddenStates forward_all(const Transformer& model, const TokenBatch& batch,
                                const ForwardOptions& opt = {}) {
    Graph g;
    HiddenStates out;
    for (Var v : forward_all(g, model, batch, opt)) out.per_layer.push_back(v.value());
    return out;
}

}  // namespace l3p
