#include <gtest/gtest.h>

#include "support.hpp"

using namespace l3p;
using l3p::test::random_tensor;
using l3p::test::tiny_config;

TEST(Recall, SelfRetrievalAndFullCorpus) {
    Rng rng(1);
    const Tensor docs = random_tensor({10, 6}, rng);
    std::vector<std::size_t> gold(10);
    for (std::size_t i = 0; i < 10; ++i) gold[i] = i;
    EXPECT_EQ(recall_at_k(docs, docs, gold, 1), 1.0);
    const Tensor q = random_tensor({10, 6}, rng);
    EXPECT_EQ(recall_at_k(q, docs, gold, 10), 1.0);
    EXPECT_THROW(recall_at_k(q, docs, gold, 11), UsageError);
    EXPECT_THROW(recall_at_k(q, docs, gold, 0), UsageError);
}

TEST(Recall, RandomEmbeddingsNearKOverN) {
    // Monte-Carlo: independent Gaussian queries and docs put the gold doc in
    // the top k with probability k/N.
    Rng rng(2);
    const std::size_t n = 200, k = 10, trials = 20;
    double total = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        const Tensor q = random_tensor({n, 64}, rng), d = random_tensor({n, 64}, rng);
        std::vector<std::size_t> gold(n);
        for (std::size_t i = 0; i < n; ++i) gold[i] = i;
        total += recall_at_k(q, d, gold, k);
    }
    const double mean = total / static_cast<double>(trials);
    // Binomial sd over 4000 draws is about 0.0034.
    EXPECT_NEAR(mean, static_cast<double>(k) / static_cast<double>(n), 0.015);
}

TEST(Ndcg, BinaryRelevance) {
    const Tensor q(Shape{1, 2}, std::vector<double>{1, 0});
    const Tensor d(Shape{3, 2}, std::vector<double>{1, 0.1, 1, 0.5, 0, 1});
    // Doc 1 ranks second: 1 / log2(3).
    EXPECT_NEAR(ndcg_at_k(q, d, {1}, 3), 1.0 / std::log2(3.0), 1e-15);
    EXPECT_EQ(ndcg_at_k(q, d, {0}, 1), 1.0);
    EXPECT_EQ(ndcg_at_k(q, d, {2}, 2), 0.0);
}

TEST(Mrr, RanksWithPessimisticTies) {
    EXPECT_EQ(reciprocal_rank({0.9, 0.1, 0.3}, 0), 1.0);
    EXPECT_EQ(reciprocal_rank({0.2, 0.9, 0.3}, 0), 1.0 / 3.0);
    EXPECT_EQ(reciprocal_rank({0.5, 0.5}, 0), 0.5);
}

TEST(Spearman, Cases) {
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
    // d = (0, 1, 1, 0): 1 - 6 * 2 / (4 * 15) = 0.8
    EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8, 1e-15);
    EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), NumericError);
    EXPECT_THROW(spearman({1}, {1}), UsageError);
}

TEST(Spearman, AverageRanksForTies) {
    EXPECT_EQ(average_ranks({10, 20, 10, 30}), (std::vector<double>{1.5, 3, 1.5, 4}));
    // Pearson of ranks [1.5,1.5,3,4] vs [1,2,3,4]
    const std::vector<double> rx{1.5, 1.5, 3, 4}, ry{1, 2, 3, 4};
    double mx = 2.5, my = 2.5, c = 0, vx = 0, vy = 0;
    for (int i = 0; i < 4; ++i) c += (rx[i] - mx) * (ry[i] - my), vx += (rx[i] - mx) * (rx[i] - mx), vy += (ry[i] - my) * (ry[i] - my);
    EXPECT_NEAR(spearman({5, 5, 6, 7}, {1, 2, 3, 4}), c / std::sqrt(vx * vy), 1e-15);
}

TEST(PairClassification, BestThreshold) {
    EXPECT_EQ(best_threshold_accuracy({0.9, 0.8, 0.2, 0.1}, {true, true, false, false}), 1.0);
    EXPECT_EQ(best_threshold_accuracy({0.1, 0.9}, {true, false}), 0.5);
    EXPECT_EQ(best_threshold_accuracy({0.5, 0.5, 0.5}, {true, false, false}), 2.0 / 3.0);
}

TEST(Suite, JsonRoundTrip) {
    SynthSpec s;
    const SynthLayout layout(s);
    const Vocabulary v = layout.vocabulary();
    const SuiteSpec spec = SuiteSpec::default_for(s, 42);
    const SuiteSpec back = suite_from_json(nlohmann::json::parse(suite_to_json(spec, v).dump()), v);
    EXPECT_EQ(back.tasks.size(), 5u);
    EXPECT_EQ(back.synth.seed, 42u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(back.tasks[i].instruction, spec.tasks[i].instruction);
        EXPECT_EQ(back.tasks[i].metric, spec.tasks[i].metric);
        EXPECT_EQ(back.tasks[i].symmetric, spec.tasks[i].symmetric);
    }
    EXPECT_THROW(suite_from_json(nlohmann::json::parse("{\"name\": 1}"), v), DataError);
}

TEST(Evaluate, DeterministicBoundedAndBookkept) {
    SynthSpec s;
    s.vocab_size = 58;
    s.n_topics = 8;
    const SuiteSpec spec = SuiteSpec::default_for(s, 3);
    const EvalSuite suite = build_suite(spec);
    ModelConfig c = tiny_config(4, 2, 58);
    const Transformer m = init_model(c);
    const EvalReport a = evaluate(m, suite, "full");
    const EvalReport b = evaluate(m, suite, "full");
    EXPECT_EQ(a.to_csv(), b.to_csv());
    EXPECT_EQ(a.per_task.size(), 5u);
    double mean = 0.0;
    for (const auto& [task, v] : a.per_task) {
        EXPECT_GE(v, 0.0) << task;
        EXPECT_LE(v, 1.0) << task;
        mean += v / 5.0;
    }
    EXPECT_NEAR(a.aggregate, mean, 1e-15);
    const Transformer pruned = prune_layers(m, PruneSpec{PruneLayers{2}, ""}).first;
    const EvalReport p = evaluate(pruned, suite, "p");
    EXPECT_EQ(p.layers, 2u);
    EXPECT_EQ(p.model_params, count_params(pruned));
    EXPECT_THROW(evaluate(init_model(tiny_config(2, 2, 40)), suite), DataError);
}

TEST(Evaluate, PerfectEmbedderScoresHigh) {
    // An oracle embedder that maps each token to its topic indicator.
    SynthSpec s;
    s.vocab_size = 58;
    s.n_topics = 8;
    s.noise_rate = 0.0;
    const SynthLayout layout(s);
    const EvalSuite suite = build_suite(SuiteSpec::default_for(s, 5));
    Embedder oracle = [&](const TokenBatch& batch, std::span<const std::size_t> lens) {
        Tensor out(Shape{batch.size(), s.n_topics});
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t j = lens[i]; j < batch[i].size(); ++j) {
                const std::size_t c = batch[i][j] - SynthLayout::kContentBase;
                for (std::size_t t = 0; t < s.n_topics; ++t) {
                    const std::size_t off = (c + layout.content - t * layout.stride) % layout.content;
                    if (off < layout.width) out.at(i, t) += 1.0;
                }
            }
        }
        return out;
    };
    const EvalReport r = evaluate(oracle, suite);
    EXPECT_GT(r.per_task.at("topic_pairs"), 0.8);
    EXPECT_GT(r.per_task.at("mixture_sts"), 0.5);
    EXPECT_GT(r.aggregate, 0.5);
}

TEST(Evaluate, AggregatePermutationInvariant) {
    EvalReport r;
    r.per_task = {{"a", 0.1}, {"b", 0.7}, {"c", 0.4}};
    const double x = EvalReport::mean_of(r.per_task);
    r.per_task = {{"c", 0.4}, {"a", 0.1}, {"b", 0.7}};
    EXPECT_EQ(EvalReport::mean_of(r.per_task), x);
}

TEST(EvalReport, CsvRoundTrip) {
    EvalReport r;
    r.label = "large";
    r.layers = 6;
    r.model_params = 12345;
    r.per_task = {{"x", 0.25}, {"y", 0.5}};
    r.aggregate = 0.375;
    const EvalReport back = EvalReport::from_csv(r.to_csv());
    EXPECT_EQ(back.label, "large");
    EXPECT_EQ(back.layers, 6u);
    EXPECT_EQ(back.model_params, 12345u);
    EXPECT_EQ(back.per_task, r.per_task);
    EXPECT_EQ(back.aggregate, 0.375);
    EXPECT_THROW(EvalReport::from_csv("nope\n"), DataError);
}
