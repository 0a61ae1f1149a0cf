// Acceptance checks, one line per criterion.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace l3p;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(double x, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << x;
    return os.str();
}

// 1. Pruning arithmetic
Outcome pruning_arithmetic() {
    std::size_t checked = 0;
    for (std::size_t n = 2; n <= 64; ++n) {
        const Transformer m = init_model([&] {
            ModelConfig c = test::tiny_config(n, n);
            c.d_model = 2;
            c.n_heads = 1;
            c.d_ff = 1;
            return c;
        }());
        for (std::size_t j = 1; j <= 19; ++j) {
            const double p = 0.05 * static_cast<double>(j);
            const std::size_t oracle = n * (20 - j) / 20;  // floor(n (1 - j/20)) in integers
            if (oracle < 1) continue;
            const auto [pruned, report] = prune_layers(m, PruneSpec{PrunePercent{p}, ""});
            if (pruned.config.n_layers != oracle || pruned.layers.size() != oracle || report.layers_after != oracle)
                return {false, "n=" + std::to_string(n) + " p=" + fmt(p, 2) + " gave " +
                                   std::to_string(pruned.config.n_layers) + ", expected " + std::to_string(oracle)};
            ++checked;
        }
    }
    // Published depths: 32 -> 25/5, 32 -> 22/8, 28 -> 25/10, 32 -> 25/8.
    struct Row {
        std::size_t n, large, small;
    };
    for (const Row r : {Row{32, 25, 5}, Row{32, 22, 8}, Row{28, 25, 10}, Row{32, 25, 8}}) {
        ModelConfig c = test::tiny_config(r.n);
        c.d_model = 2;
        c.n_heads = 1;
        c.d_ff = 1;
        const Variants v = make_variants(init_model(c), L3Selection{r.small, r.large, r.n / 2});
        if (v.large.model.config.n_layers != r.large || v.small.model.config.n_layers != r.small)
            return {false, "Table 1 row n=" + std::to_string(r.n)};
        ++checked;
    }
    if (pruned_layer_count(28, 0.1) != 25 || pruned_layer_count(32, 0.2) != 25) return {false, "percent form of 25"};
    return {true, std::to_string(checked) + " cases exact"};
}

// 2. Prefix equivalence
Outcome prefix_equivalence() {
    std::size_t checked = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 31);
        const std::size_t n = 4 + rng.below(9);
        const Transformer full = init_model(test::tiny_config(n, seed));
        const TokenBatch batch = test::random_batch(rng, 3, 40, 1, 12);
        const HiddenStates ref = forward_all(full, batch);
        for (std::size_t k = 1; k <= n; ++k) {
            const Transformer pruned = prune_layers(full, PruneSpec{PruneLayers{k}, ""}).first;
            const HiddenStates hs = forward_all(pruned, batch);
            if (!(hs.per_layer.back() == ref.per_layer[k]))
                return {false, "seed " + std::to_string(seed) + " depth " + std::to_string(k)};
            ++checked;
        }
    }
    return {true, std::to_string(checked) + " depths bitwise equal"};
}

// 3. Gradient correctness
Outcome gradient_correctness() {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, test::pipeline_gradient_error(seed * 7919));
    return {worst < 1e-5, "worst relative error " + [&] {
                std::ostringstream os;
                os << std::scientific << std::setprecision(2) << worst;
                return os.str();
            }()};
}

// 4. Loss oracles
Outcome loss_oracles() {
    for (std::size_t b : {1u, 2u, 4u, 8u, 16u}) {
        Rng rng(b);
        const Tensor q = test::random_tensor({b, 5}, rng);
        const Tensor c(Shape{b, 5}, 0.7);
        if (std::abs(info_nce(ContrastiveBatch{q, c, c, 0.05}) - std::log(2.0 * double(b))) > 1e-9)
            return {false, "uniform case B=" + std::to_string(b)};
    }
    const double hand = info_nce(ContrastiveBatch{Tensor(Shape{1, 2}, std::vector<double>{3, 0}),
                                                  Tensor(Shape{1, 2}, std::vector<double>{0.5, 0}),
                                                  Tensor(Shape{1, 2}, std::vector<double>{-2, 0}), 1.0});
    if (std::abs(hand - 0.12693) > 1e-4) return {false, "B=1 hand case " + fmt(hand, 6)};

    SynthSpec s;
    s.tuple_count = 200;
    s.seed = 4;
    const auto data = synth_generate(s);
    ModelConfig c = test::tiny_config(6, 3, s.vocab_size);
    c.max_seq_len = 32;
    const Transformer m = init_model(c);
    const ProfileOptions opt{48, 16, 0.05, 9};
    const LayerLossProfile prof = profile(m, data, opt);
    const auto sampled = sample_tuples(data, opt.sample_count, opt.seed);
    double worst = 0.0;
    for (std::size_t l = 1; l <= c.n_layers; ++l)
        worst = std::max(worst, std::abs(prof.at_layer(l) - layer_loss(m, sampled, l, LossOptions{16, 0.05})));
    if (worst > 1e-10) return {false, "profile differs by " + std::to_string(worst)};
    return {true, "ln(2B) exact, hand case " + fmt(hand, 5) + ", profile max diff " + [&] {
                std::ostringstream os;
                os << std::scientific << std::setprecision(1) << worst;
                return os.str();
            }()};
}

// 5. Selection vs brute force
Outcome selection() {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 4 + rng.below(37);
        std::vector<double> losses(n);
        // Coarse values make ties common.
        for (double& x : losses) x = static_cast<double>(rng.below(6)) * 0.5;
        const std::size_t mid = n / 2;
        std::size_t small = 1, large = mid + 1;
        for (std::size_t l = 1; l <= mid; ++l)
            if (losses[l - 1] < losses[small - 1]) small = l;
        for (std::size_t l = mid + 1; l <= n; ++l)
            if (losses[l - 1] < losses[large - 1]) large = l;
        const L3Selection got = l3prune_select(losses);
        if (got.small_layer != small || got.large_layer != large || got.midpoint != mid)
            return {false, "trial " + std::to_string(trial)};
    }
    return {true, "200 arrays match"};
}

// 6. LoRA contracts
Outcome lora_contracts() {
    SynthSpec s;
    s.tuple_count = 128;
    ModelConfig c = test::tiny_config(3, 5, s.vocab_size);
    c.max_seq_len = 32;
    const Transformer base = init_model(c);
    Rng rng(6);
    const TokenBatch batch = test::random_batch(rng, 4, s.vocab_size, 2, 10);
    const std::vector<std::size_t> lens{2, 0, 1, 0};
    AdaptedModel a = attach_lora(base, 4, 8.0, default_lora_targets(), 3);
    if (!(a.embed(batch, lens) == embed(base, batch, lens))) return {false, "fresh adapters change output"};

    TrainConfig t;
    t.steps = 15;
    t.batch_size = 8;
    t.warmup_steps = 5;
    t.lr = 5e-3;
    t.seed = 2;
    train(a, synth_generate(s), t);
    if (!(a.base() == base)) return {false, "base weights moved during training"};
    const Tensor adapted = a.embed(batch, lens);
    if (adapted == embed(base, batch, lens)) return {false, "training left the adapters inert"};
    const Tensor merged = embed(merge(a), batch, lens);
    double worst = 0.0;
    for (std::size_t i = 0; i < merged.size(); ++i) worst = std::max(worst, std::abs(merged[i] - adapted[i]));
    if (worst > 1e-12) return {false, "merge differs by " + std::to_string(worst)};
    std::ostringstream os;
    os << "transparent, base frozen, merge max diff " << std::scientific << std::setprecision(1) << worst;
    return {true, os.str()};
}

// 7. Qualitative claims at toy scale
Outcome toy_claims() {
    SynthSpec s;
    s.seed = 7;
    const auto data = synth_generate(s);
    const EvalSuite suite = build_suite(SuiteSpec::default_for(s, 99));
    const ModelConfig c{s.vocab_size, 32, 8, 4, 64, 32, 42};
    const Transformer full = init_model(c);

    auto trained = [&](const Transformer& m, double* final_loss = nullptr) {
        const TrainConfig tc = [] {
            TrainConfig t = TrainConfig::desk();
            t.seed = 11;
            return t;
        }();
        AdaptedModel a = attach_lora(m, tc.lora_rank, tc.lora_alpha, tc.targets, 5);
        const TrainCurve curve = train(a, data, tc);
        if (final_loss) *final_loss = curve.tail_mean(50);
        return evaluate(merge(a), suite).score();
    };

    const double untrained_full = evaluate(full, suite).score();
    std::vector<double> scores, losses;
    for (double p : {0.0, 0.25, 0.5, 0.75}) {
        const Transformer m = p == 0.0 ? full : prune_layers(full, PruneSpec{PrunePercent{p}, ""}).first;
        double loss = 0.0;
        scores.push_back(trained(m, &loss));
        losses.push_back(loss);
    }
    const bool a = std::abs(scores[1] - scores[0]) <= 3.0;
    const bool b = scores[3] > untrained_full;
    bool cc = true;
    for (std::size_t i = 1; i < losses.size(); ++i) cc &= losses[i] >= losses[i - 1] - 0.05;

    const LayerLossProfile prof = profile(full, data, ProfileOptions{256, 32, 0.05, 3});
    const L3Selection sel = l3prune_select(prof);
    const Variants v = make_variants(full, sel);
    const double small_before = evaluate(v.small.model, suite).score();
    const double large_before = evaluate(v.large.model, suite).score();
    const double small_after = trained(v.small.model);
    const double large_after = trained(v.large.model);
    const bool d = small_after > small_before && large_after > large_before;

    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << "(a) " << (a ? "ok" : "FAIL") << " full " << scores[0] << " vs 25% "
       << scores[1] << "; (b) " << (b ? "ok" : "FAIL") << " 75% " << scores[3] << " vs untrained " << untrained_full
       << "; (c) " << (cc ? "ok" : "FAIL") << " final loss";
    os << std::setprecision(3);
    for (double l : losses) os << ' ' << l;
    os << std::setprecision(1) << "; (d) " << (d ? "ok" : "FAIL") << " small=" << sel.small_layer << ' '
       << small_before << "->" << small_after << ", large=" << sel.large_layer << ' ' << large_before << "->"
       << large_after;
    return {a && b && cc && d, os.str()};
}

// 8. CLI reproducibility
int l3p_run(const std::string& args) {
    const std::string cmd = "\"" L3P_BIN "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_reproducibility() {
    const fs::path root = test::temp_dir("acceptance_cli");
    for (const std::string run : {"a", "b"}) {
        const std::string d = (root / run).string();
        const std::vector<std::string> steps{
            "synth --tuples 300 --seed 13 --out " + d + "/data",
            "init --vocab " + d + "/data/vocab.txt --layers 6 --d-model 16 --heads 2 --d-ff 32 --seed 13 --out " + d + "/base",
            "profile --model " + d + "/base/model.l3p --data " + d + "/data/train.jsonl --samples 64 --seed 13 --out " + d + "/profile",
            "prune --model " + d + "/base/model.l3p --from-selection large --selection " + d + "/profile/selection.txt --out " + d + "/large",
            "train --model " + d + "/large/model.l3p --data " + d + "/data/train.jsonl --steps 20 --batch 8 --seed 13 --out " + d + "/trained",
            "eval --model " + d + "/trained/model.l3p --suite " + d + "/data/suite.json --label trained --out " + d + "/eval_trained",
            "eval --model " + d + "/base/model.l3p --suite " + d + "/data/suite.json --label base --out " + d + "/eval_base",
            "sweep --model " + d + "/base/model.l3p --percents 0.1,0.3,0.5,0.8 --out " + d + "/sweep",
            "report --runs " + d + "/eval_base " + d + "/eval_trained --out " + d + "/report",
        };
        for (const auto& s : steps)
            if (int rc = l3p_run(s); rc != 0) return {false, "exit " + std::to_string(rc) + " from: l3p " + s};
    }
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (e.path().extension() != ".csv") continue;
        const fs::path twin = root / "b" / fs::relative(e.path(), root / "a");
        if (!fs::exists(twin) || read_text_file(e.path()) != read_text_file(twin))
            return {false, fs::relative(e.path(), root / "a").string() + " differs"};
        ++compared;
    }
    if (compared < 6) return {false, "only " + std::to_string(compared) + " CSV files produced"};
    return {true, std::to_string(compared) + " CSV files byte-identical"};
}

// 9. Checkpoint integrity
Outcome format_integrity() {
    ModelConfig c = test::tiny_config(4, 21);
    Transformer m = init_model(c);
    Rng rng(3);
    for (auto& [name, t] : m.named_parameters())
        for (double& x : t->data()) x = rng.normal() * 1e3 + 1e-300;
    const fs::path dir = test::temp_dir("acceptance_ckpt");
    save_checkpoint(m, dir / "m.l3p");
    const Transformer back = load_checkpoint(dir / "m.l3p");
    if (!(back == m) || serialize_checkpoint(back) != serialize_checkpoint(m)) return {false, "round trip not exact"};

    const std::string bytes = serialize_checkpoint(m);
    auto classify = [](const std::string& b) -> std::string {
        try {
            deserialize_checkpoint(b);
            return "none";
        } catch (const BadMagicError&) {
            return "magic";
        } catch (const ChecksumError&) {
            return "checksum";
        } catch (const TruncatedError&) {
            return "truncated";
        } catch (const std::exception&) {
            return "other";
        }
    };
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    const std::string cut = bytes.substr(0, bytes.size() - 7);
    const std::string r1 = classify(bad_magic), r2 = classify(flipped), r3 = classify(cut);
    if (r1 != "magic" || r2 != "checksum" || r3 != "truncated")
        return {false, "magic->" + r1 + ", crc->" + r2 + ", truncated->" + r3};
    return {true, "bit-exact round trip; magic/checksum/truncation errors distinct"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"pruning arithmetic", pruning_arithmetic},   {"prefix equivalence", prefix_equivalence},
        {"gradient correctness", gradient_correctness}, {"loss oracles", loss_oracles},
        {"L3Prune selection", selection},              {"LoRA contracts", lora_contracts},
        {"toy-scale claims", toy_claims},              {"CLI reproducibility", cli_reproducibility},
        {"checkpoint integrity", format_integrity},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << ": " << criteria[i].first << " ["
                  << o.detail << "] (" << fmt(secs, 1) << " s)" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
