#pragma once

// Small-scale evaluation suite with one proxy per benchmark category:
// retrieval (recall@1, nDCG@10), reranking (MRR), STS (Spearman) and pair
// classification (best-threshold accuracy). Tasks are generated from the
// synthetic topic layout, so the suite is fully described by a JSON file.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "l3prune/data.hpp"
#include "l3prune/error.hpp"
#include "l3prune/model.hpp"
#include "l3prune/pooling.hpp"
#include "l3prune/rng.hpp"

namespace l3p {

// ---------------------------------------------------------------------------
// Metrics

// Cosine similarity of every row of `a` against every row of `b`.
inline std::vector<std::vector<double>> cosine_matrix(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("cosine_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t d = a.dim(1);
    auto norms = [d](const Tensor& t) {
        std::vector<double> out(t.dim(0));
        for (std::size_t r = 0; r < out.size(); ++r) {
            double ss = 0.0;
            for (std::size_t k = 0; k < d; ++k) ss += t[r * d + k] * t[r * d + k];
            out[r] = std::sqrt(ss);
            if (!(out[r] > 0.0)) throw NumericError("zero-norm embedding; cosine similarity is undefined");
        }
        return out;
    };
    const auto na = norms(a), nb = norms(b);
    std::vector<std::vector<double>> out(a.dim(0), std::vector<double>(b.dim(0)));
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < b.dim(0); ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += a[i * d + k] * b[j * d + k];
            out[i][j] = dot / (na[i] * nb[j]);
        }
    return out;
}

namespace detail {

// 1-based rank of `target` when row is sorted by descending score; ties are
// resolved pessimistically (equal scores rank ahead of the target).
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t target) {
    std::size_t rank = 1;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j != target && scores[j] >= scores[target]) ++rank;
    }
    return rank;
}

inline void check_retrieval_args(const Tensor& queries, const Tensor& docs, const std::vector<std::size_t>& gold,
                                 std::size_t k) {
    if (k < 1) throw UsageError("k must be at least 1");
    if (k > docs.dim(0)) {
        throw UsageError("k = " + std::to_string(k) + " exceeds corpus size " + std::to_string(docs.dim(0)));
    }
    if (gold.size() != queries.dim(0)) throw ShapeError("gold map size does not match query count");
    for (std::size_t g : gold) {
        if (g >= docs.dim(0)) throw DataError("gold document id out of range");
    }
}

}  // namespace detail

inline double recall_at_k(const Tensor& queries, const Tensor& docs, const std::vector<std::size_t>& gold,
                          std::size_t k) {
    detail::check_retrieval_args(queries, docs, gold, k);
    const auto sims = cosine_matrix(queries, docs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) hits += detail::rank_of(sims[i], gold[i]) <= k ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

// Binary relevance, one relevant document per query, log2 discount.
inline double ndcg_at_k(const Tensor& queries, const Tensor& docs, const std::vector<std::size_t>& gold,
                        std::size_t k) {
    detail::check_retrieval_args(queries, docs, gold, k);
    const auto sims = cosine_matrix(queries, docs);
    double total = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const std::size_t r = detail::rank_of(sims[i], gold[i]);
        if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    return total / static_cast<double>(gold.size());
}

// Reciprocal rank of the positive among its own candidate list.
inline double reciprocal_rank(const std::vector<double>& scores, std::size_t positive) {
    return 1.0 / static_cast<double>(detail::rank_of(scores, positive));
}

// Average ranks (1-based), ties sharing the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& pred, const std::vector<double>& gold) {
    if (pred.size() != gold.size()) throw ShapeError("spearman: length mismatch");
    if (pred.size() < 2) throw UsageError("spearman needs at least 2 points");
    const auto rp = average_ranks(pred), rg = average_ranks(gold);
    const double n = static_cast<double>(pred.size());
    const double mp = std::accumulate(rp.begin(), rp.end(), 0.0) / n;
    const double mg = std::accumulate(rg.begin(), rg.end(), 0.0) / n;
    double cov = 0.0, vp = 0.0, vg = 0.0;
    for (std::size_t i = 0; i < rp.size(); ++i) {
        cov += (rp[i] - mp) * (rg[i] - mg);
        vp += (rp[i] - mp) * (rp[i] - mp);
        vg += (rg[i] - mg) * (rg[i] - mg);
    }
    if (vp == 0.0 || vg == 0.0) throw NumericError("spearman: constant input, correlation undefined");
    return cov / std::sqrt(vp * vg);
}

// Accuracy of the best rule "positive iff score >= threshold".
inline double best_threshold_accuracy(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size() || scores.empty()) throw ShapeError("pair classification: bad inputs");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const std::size_t total_neg =
        static_cast<std::size_t>(std::count(labels.begin(), labels.end(), false));
    // Threshold above everything: all predicted negative.
    std::size_t best = total_neg;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        labels[order[i]] ? ++tp : ++fp;
        // Only cut between distinct scores.
        if (i + 1 < order.size() && scores[order[i + 1]] == scores[order[i]]) continue;
        best = std::max(best, tp + (total_neg - fp));
    }
    return static_cast<double>(best) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Suite

enum class TaskKind { retrieval, reranking, sts, pair_classification };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::retrieval;
    std::string metric;  // "recall@1", "ndcg@10", "mrr", "spearman", "accuracy"
    TokenSeq instruction;
    bool symmetric = false;
};

struct SuiteSpec {
    std::string name = "synthetic";
    SynthSpec synth;
    std::size_t rounds = 4;  // retrieval rounds, one query per topic each
    std::size_t items = 128;  // reranking items, STS and pair-classification pairs
    std::vector<TaskSpec> tasks;

    static SuiteSpec default_for(const SynthSpec& synth, std::uint64_t seed) {
        SuiteSpec s;
        s.synth = synth;
        s.synth.seed = seed;
        s.tasks = {
            {"topic_retrieval", TaskKind::retrieval, "recall@1", {2, 3, 4}, false},
            {"topic_retrieval_ranked", TaskKind::retrieval, "ndcg@10", {2, 3, 7}, false},
            {"candidate_rerank", TaskKind::reranking, "mrr", {2, 8}, false},
            {"mixture_sts", TaskKind::sts, "spearman", {5, 6}, true},
            {"topic_pairs", TaskKind::pair_classification, "accuracy", {5, 9}, true},
        };
        return s;
    }
};

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::retrieval: return "retrieval";
        case TaskKind::reranking: return "reranking";
        case TaskKind::sts: return "sts";
        case TaskKind::pair_classification: return "pair_classification";
    }
    return "?";
}

inline TaskKind task_kind_from(const std::string& s) {
    if (s == "retrieval") return TaskKind::retrieval;
    if (s == "reranking") return TaskKind::reranking;
    if (s == "sts") return TaskKind::sts;
    if (s == "pair_classification") return TaskKind::pair_classification;
    throw DataError("unknown task kind " + s);
}

inline nlohmann::ordered_json suite_to_json(const SuiteSpec& s, const Vocabulary& vocab) {
    nlohmann::ordered_json j;
    j["name"] = s.name;
    j["synth"] = {{"vocab_size", s.synth.vocab_size}, {"n_topics", s.synth.n_topics},
                  {"noise_rate", s.synth.noise_rate}, {"seed", s.synth.seed},
                  {"query_len", s.synth.query_len}, {"doc_len", s.synth.doc_len}};
    j["rounds"] = s.rounds;
    j["items"] = s.items;
    j["tasks"] = nlohmann::ordered_json::array();
    for (const auto& t : s.tasks) {
        j["tasks"].push_back({{"name", t.name}, {"kind", to_string(t.kind)}, {"metric", t.metric},
                              {"instruction", vocab.detokenize(t.instruction)}, {"symmetric", t.symmetric}});
    }
    return j;
}

inline SuiteSpec suite_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
    try {
        SuiteSpec s;
        s.name = j.at("name").get<std::string>();
        const auto& sj = j.at("synth");
        s.synth.vocab_size = sj.at("vocab_size").get<std::size_t>();
        s.synth.n_topics = sj.at("n_topics").get<std::size_t>();
        s.synth.noise_rate = sj.at("noise_rate").get<double>();
        s.synth.seed = sj.at("seed").get<std::uint64_t>();
        s.synth.query_len = sj.at("query_len").get<std::size_t>();
        s.synth.doc_len = sj.at("doc_len").get<std::size_t>();
        s.rounds = j.at("rounds").get<std::size_t>();
        s.items = j.at("items").get<std::size_t>();
        for (const auto& tj : j.at("tasks")) {
            TaskSpec t;
            t.name = tj.at("name").get<std::string>();
            t.kind = task_kind_from(tj.at("kind").get<std::string>());
            t.metric = tj.at("metric").get<std::string>();
            t.instruction = vocab.tokenize(tj.at("instruction").get<std::string>());
            t.symmetric = tj.at("symmetric").get<bool>();
            s.tasks.push_back(std::move(t));
        }
        if (s.synth.vocab_size != vocab.size()) {
            throw DataError("suite vocab_size " + std::to_string(s.synth.vocab_size) +
                            " does not match vocabulary of " + std::to_string(vocab.size()));
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed suite: ") + e.what());
    }
}

struct EvalReport {
    std::string label;
    std::map<std::string, double> per_task;  // metric values in [0, 1]
    double aggregate = 0.0;
    std::size_t model_params = 0;
    std::size_t layers = 0;

    double score() const { return 100.0 * aggregate; }

    static double mean_of(const std::map<std::string, double>& per_task) {
        if (per_task.empty()) return 0.0;
        double s = 0.0;
        for (const auto& [k, v] : per_task) s += v;
        return s / static_cast<double>(per_task.size());
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << "label,layers,params,task,value\n" << std::setprecision(17);
        for (const auto& [task, v] : per_task) {
            os << label << ',' << layers << ',' << model_params << ',' << task << ',' << v << '\n';
        }
        os << label << ',' << layers << ',' << model_params << ",aggregate," << aggregate << '\n';
        return os.str();
    }

    static EvalReport from_csv(const std::string& text) {
        EvalReport r;
        std::istringstream is(text);
        std::string line;
        std::getline(is, line);
        if (line != "label,layers,params,task,value") throw DataError("eval report: unexpected header");
        bool have_aggregate = false;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::stringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) f.push_back(cell);
            if (f.size() != 5) throw DataError("eval report: bad row '" + line + "'");
            try {
                r.label = f[0];
                r.layers = std::stoul(f[1]);
                r.model_params = std::stoul(f[2]);
                if (f[3] == "aggregate") {
                    r.aggregate = std::stod(f[4]);
                    have_aggregate = true;
                } else {
                    r.per_task[f[3]] = std::stod(f[4]);
                }
            } catch (const std::exception&) {
                throw DataError("eval report: bad number in '" + line + "'");
            }
        }
        if (!have_aggregate) throw DataError("eval report: missing aggregate row");
        return r;
    }
};

// Concrete task data generated from a SuiteSpec.
struct SequencePair {
    TokenSeq a;
    TokenSeq b;
    double target;  // STS gold similarity or pair label
};

struct RetrievalRound {
    std::vector<TokenSeq> queries;
    std::vector<TokenSeq> corpus;
    std::vector<std::size_t> gold;
};

struct RerankItem {
    TokenSeq query;
    std::vector<TokenSeq> candidates;  // candidates[0] is the positive
};

struct EvalTask {
    TaskSpec spec;
    std::vector<RetrievalRound> rounds;
    std::vector<RerankItem> rerank;
    std::vector<SequencePair> pairs;
};

struct EvalSuite {
    SuiteSpec spec;
    std::vector<EvalTask> tasks;
};

inline EvalSuite build_suite(const SuiteSpec& spec) {
    const SynthLayout layout(spec.synth);
    const std::size_t nt = spec.synth.n_topics;
    const double noise = spec.synth.noise_rate;
    EvalSuite suite;
    suite.spec = spec;
    for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
        EvalTask task;
        task.spec = spec.tasks[ti];
        Rng rng(spec.synth.seed * 1000003ULL + ti);
        switch (task.spec.kind) {
            case TaskKind::retrieval:
                for (std::size_t r = 0; r < spec.rounds; ++r) {
                    RetrievalRound round;
                    for (std::size_t t = 0; t < nt; ++t) {
                        round.queries.push_back(layout.sample_topic(rng, t, spec.synth.query_len, noise));
                        round.corpus.push_back(layout.sample_topic(rng, t, spec.synth.doc_len, 0.0));
                        round.gold.push_back(t);
                    }
                    task.rounds.push_back(std::move(round));
                }
                break;
            case TaskKind::reranking:
                for (std::size_t i = 0; i < spec.items; ++i) {
                    RerankItem item;
                    const std::size_t t = rng.below(nt);
                    item.query = layout.sample_topic(rng, t, spec.synth.query_len, noise);
                    item.candidates.push_back(layout.sample_topic(rng, t, spec.synth.doc_len, 0.0));
                    item.candidates.push_back(layout.sample_topic(rng, (t + 1) % nt, spec.synth.doc_len, 0.0));
                    for (int c = 0; c < 3; ++c) {
                        const std::size_t other = (t + 2 + rng.below(nt - 2)) % nt;
                        item.candidates.push_back(layout.sample_topic(rng, other, spec.synth.doc_len, 0.0));
                    }
                    task.rerank.push_back(std::move(item));
                }
                break;
            case TaskKind::sts:
                for (std::size_t i = 0; i < spec.items; ++i) {
                    const std::size_t t = rng.below(nt);
                    const std::size_t far = (t + nt / 2) % nt;
                    const double mix = static_cast<double>(rng.below(5)) / 4.0;
                    SequencePair p;
                    p.a = layout.sample_topic(rng, t, spec.synth.doc_len, 0.0);
                    p.b = layout.sample_mixture(rng, t, far, spec.synth.doc_len, mix);
                    p.target = mix;
                    task.pairs.push_back(std::move(p));
                }
                break;
            case TaskKind::pair_classification:
                for (std::size_t i = 0; i < spec.items; ++i) {
                    const std::size_t t = rng.below(nt);
                    const bool same = rng.uniform() < 0.5;
                    SequencePair p;
                    p.a = layout.sample_topic(rng, t, spec.synth.doc_len, 0.0);
                    p.b = layout.sample_topic(rng, same ? t : (t + 1) % nt, spec.synth.doc_len, 0.0);
                    p.target = same ? 1.0 : 0.0;
                    task.pairs.push_back(std::move(p));
                }
                break;
        }
        suite.tasks.push_back(std::move(task));
    }
    return suite;
}

// Anything that maps token sequences plus instruction lengths to [n, d] rows.
using Embedder = std::function<Tensor(const TokenBatch&, std::span<const std::size_t>)>;

inline Embedder model_embedder(const Transformer& model, std::size_t chunk = 64) {
    return [&model, chunk](const TokenBatch& tokens, std::span<const std::size_t> lens) {
        const std::size_t d = model.config.d_model;
        Tensor out(Shape{tokens.size(), d});
        for (std::size_t start = 0; start < tokens.size(); start += chunk) {
            const std::size_t end = std::min(tokens.size(), start + chunk);
            TokenBatch part(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            tokens.begin() + static_cast<std::ptrdiff_t>(end));
            const Tensor e = embed(model, part, lens.subspan(start, end - start));
            std::copy(e.data().begin(), e.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * d));
        }
        return out;
    };
}

namespace detail {

// Prepends the instruction; its length is excluded from pooling.
inline Tensor embed_with_instruction(const Embedder& embedder, const std::vector<TokenSeq>& seqs,
                                     const TokenSeq& instruction, bool with_instruction) {
    TokenBatch batch;
    std::vector<std::size_t> lens;
    for (const TokenSeq& s : seqs) {
        TokenSeq full;
        if (with_instruction) full = instruction;
        full.insert(full.end(), s.begin(), s.end());
        batch.push_back(std::move(full));
        lens.push_back(with_instruction ? instruction.size() : 0);
    }
    return embedder(batch, lens);
}

inline Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t end) {
    const std::size_t d = t.dim(1);
    Tensor out(Shape{end - begin, d});
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(begin * d), out.size(), out.data().begin());
    return out;
}

inline double run_task(const EvalTask& task, const Embedder& embedder) {
    const TaskSpec& s = task.spec;
    // Queries always carry the instruction; documents only for symmetric tasks.
    const bool doc_instr = s.symmetric;
    switch (s.kind) {
        case TaskKind::retrieval: {
            std::size_t k = 0;
            bool ndcg = false;
            if (s.metric.rfind("recall@", 0) == 0) {
                k = std::stoul(s.metric.substr(7));
            } else if (s.metric.rfind("ndcg@", 0) == 0) {
                k = std::stoul(s.metric.substr(5));
                ndcg = true;
            } else {
                throw DataError("retrieval task " + s.name + " has unsupported metric " + s.metric);
            }
            double total = 0.0;
            for (const auto& round : task.rounds) {
                const Tensor q = embed_with_instruction(embedder, round.queries, s.instruction, true);
                const Tensor d = embed_with_instruction(embedder, round.corpus, s.instruction, doc_instr);
                // A cutoff past the corpus ranks everything.
                const std::size_t kk = std::min(k, round.corpus.size());
                total += ndcg ? ndcg_at_k(q, d, round.gold, kk) : recall_at_k(q, d, round.gold, kk);
            }
            return total / static_cast<double>(task.rounds.size());
        }
        case TaskKind::reranking: {
            std::vector<TokenSeq> queries, cands;
            for (const auto& item : task.rerank) {
                queries.push_back(item.query);
                cands.insert(cands.end(), item.candidates.begin(), item.candidates.end());
            }
            const Tensor q = embed_with_instruction(embedder, queries, s.instruction, true);
            const Tensor c = embed_with_instruction(embedder, cands, s.instruction, doc_instr);
            double total = 0.0;
            std::size_t offset = 0;
            for (std::size_t i = 0; i < task.rerank.size(); ++i) {
                const std::size_t nc = task.rerank[i].candidates.size();
                const auto sims = cosine_matrix(rows_of(q, i, i + 1), rows_of(c, offset, offset + nc));
                total += reciprocal_rank(sims[0], 0);
                offset += nc;
            }
            return total / static_cast<double>(task.rerank.size());
        }
        case TaskKind::sts:
        case TaskKind::pair_classification: {
            std::vector<TokenSeq> as, bs;
            for (const auto& p : task.pairs) {
                as.push_back(p.a);
                bs.push_back(p.b);
            }
            const Tensor ea = embed_with_instruction(embedder, as, s.instruction, true);
            const Tensor eb = embed_with_instruction(embedder, bs, s.instruction, doc_instr);
            std::vector<double> sims(task.pairs.size());
            for (std::size_t i = 0; i < sims.size(); ++i) {
                sims[i] = cosine_matrix(rows_of(ea, i, i + 1), rows_of(eb, i, i + 1))[0][0];
            }
            if (s.kind == TaskKind::sts) {
                std::vector<double> gold;
                for (const auto& p : task.pairs) gold.push_back(p.target);
                // Anti-correlated similarity is as useless as none.
                return std::max(0.0, spearman(sims, gold));
            }
            std::vector<bool> labels;
            for (const auto& p : task.pairs) labels.push_back(p.target > 0.5);
            return best_threshold_accuracy(sims, labels);
        }
    }
    return 0.0;
}

}  // namespace detail

inline EvalReport evaluate(const Embedder& embedder, const EvalSuite& suite) {
    EvalReport r;
    for (const auto& task : suite.tasks) r.per_task[task.spec.name] = detail::run_task(task, embedder);
    r.aggregate = EvalReport::mean_of(r.per_task);
    return r;
}

inline EvalReport evaluate(const Transformer& model, const EvalSuite& suite, std::string label = {}) {
    if (model.config.vocab_size != suite.spec.synth.vocab_size) {
        throw DataError("mismatched vocabularies: model has " + std::to_string(model.config.vocab_size) +
                        " tokens, suite expects " + std::to_string(suite.spec.synth.vocab_size));
    }
    EvalReport r = evaluate(model_embedder(model), suite);
    r.label = std::move(label);
    r.model_params = count_params(model);
    r.layers = model.config.n_layers;
    return r;
}

}  // namespace l3p
