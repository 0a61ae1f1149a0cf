// l3p: profile -> select -> prune -> train -> eval -> report.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "l3prune/l3prune.hpp"

namespace fs = std::filesystem;
using namespace l3p;

namespace {

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv("L3P_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw UsageError(std::string("L3P_SEED is not an integer: ") + env);
        }
    }
    return 0;
}

fs::path default_vocab(const std::string& explicit_path, const fs::path& next_to) {
    if (!explicit_path.empty()) return explicit_path;
    return next_to.parent_path() / "vocab.txt";
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// --- init ------------------------------------------------------------------

struct InitArgs {
    std::size_t vocab_size = 0;
    std::string vocab;
    std::size_t d_model = 32, layers = 8, heads = 4, d_ff = 64, max_seq_len = 32;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void cmd_init(const InitArgs& a) {
    ModelConfig c;
    c.vocab_size = a.vocab_size;
    if (!a.vocab.empty()) c.vocab_size = Vocabulary::load(a.vocab).size();
    if (c.vocab_size == 0) throw UsageError("init needs --vocab or --vocab-size");
    c.d_model = a.d_model;
    c.n_layers = a.layers;
    c.n_heads = a.heads;
    c.d_ff = a.d_ff;
    c.max_seq_len = a.max_seq_len;
    c.seed = resolve_seed(a.seed);
    c.validate();
    const fs::path out = a.out;
    RunManifest m{"init", "", c.seed, {{"config", c.to_text()}}, {}, {"model.l3p"}};
    if (!a.vocab.empty()) m.inputs.push_back(a.vocab);
    m.write(out);
    save_checkpoint(init_model(c), out / "model.l3p");
    std::cout << "initialized " << c.n_layers << "-layer model, " << count_params(init_model(c)) << " parameters\n";
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
    SynthSpec spec;
    std::optional<std::uint64_t> seed;
    std::uint64_t suite_seed = 1000;
    std::string out;
};

void cmd_synth(SynthArgs a) {
    a.spec.seed = resolve_seed(a.seed);
    const fs::path out = a.out;
    RunManifest m{"synth", "", a.spec.seed, {}, {}, {"vocab.txt", "train.jsonl", "suite.json"}};
    m.settings = {{"vocab_size", std::to_string(a.spec.vocab_size)},
                  {"n_topics", std::to_string(a.spec.n_topics)},
                  {"tuple_count", std::to_string(a.spec.tuple_count)},
                  {"noise_rate", fmt(a.spec.noise_rate)},
                  {"suite_seed", std::to_string(a.suite_seed)}};
    m.write(out);
    const SynthLayout layout(a.spec);
    const Vocabulary vocab = layout.vocabulary();
    vocab.save(out / "vocab.txt");
    write_jsonl(out / "train.jsonl", synth_generate(a.spec), vocab);
    write_text_file(out / "suite.json", suite_to_json(SuiteSpec::default_for(a.spec, a.suite_seed), vocab).dump(2) + "\n");
    std::cout << "wrote " << a.spec.tuple_count << " tuples over " << vocab.size() << " tokens to " << out << "\n";
}

// --- profile ---------------------------------------------------------------

struct ProfileArgs {
    std::string model, data, vocab, out;
    std::size_t samples = kDefaultProfileSamples;
    std::size_t batch = kDefaultProfileBatch;
    double temperature = kDefaultTemperature;
    std::optional<std::uint64_t> seed;
};

void cmd_profile(const ProfileArgs& a) {
    const fs::path out = a.out;
    const fs::path vocab_path = default_vocab(a.vocab, a.data);
    ProfileOptions opt{a.samples, a.batch, a.temperature, resolve_seed(a.seed)};
    RunManifest m{"profile", "", opt.seed, {}, {a.model, a.data, vocab_path}, {"layer_loss.csv", "selection.txt", "layer_loss.svg"}};
    m.settings = {{"samples", std::to_string(opt.sample_count)}, {"batch", std::to_string(opt.batch_size)},
                  {"temperature", fmt(opt.temperature)}};
    m.write(out);

    const Transformer model = load_checkpoint(a.model);
    const Vocabulary vocab = Vocabulary::load(vocab_path);
    if (vocab.size() != model.config.vocab_size) throw DataError("mismatched vocabularies between model and data");
    const auto dataset = load_jsonl(a.data, vocab);
    const LayerLossProfile prof = profile(model, dataset, opt);
    const L3Selection sel = l3prune_select(prof);

    write_text_file(out / "layer_loss.csv", prof.to_csv());
    write_text_file(out / "selection.txt", sel.to_text());
    PlotSeries s{"loss", {}, {}};
    for (std::size_t l = 1; l <= prof.n_layers(); ++l) s.points.emplace_back(double(l), prof.at_layer(l));
    const std::vector<PlotMarker> marks{
        {double(sel.small_layer), prof.at_layer(sel.small_layer), "small (" + std::to_string(sel.small_layer) + ")"},
        {double(sel.large_layer), prof.at_layer(sel.large_layer), "large (" + std::to_string(sel.large_layer) + ")"}};
    write_text_file(out / "layer_loss.svg", svg_plot("Layerwise loss", "layer", "contrastive loss", {s}, marks));
    std::cout << sel.to_text();
}

// --- prune -----------------------------------------------------------------

struct PruneArgs {
    std::string model, out, selection_file;
    std::optional<double> percent;
    std::optional<std::size_t> layers;
    std::string from_selection;
};

void cmd_prune(const PruneArgs& a) {
    const int chosen = int(a.percent.has_value()) + int(a.layers.has_value()) + int(!a.from_selection.empty());
    if (chosen != 1) throw UsageError("prune needs exactly one of --percent, --layers, --from-selection");
    const fs::path out = a.out;
    RunManifest m{"prune", "", 0, {}, {a.model}, {"model.l3p", "prune_report.csv"}};
    PruneSpec spec;
    if (a.percent) {
        spec = PruneSpec{PrunePercent{*a.percent}, "percent"};
        m.settings["percent"] = fmt(*a.percent);
    } else if (a.layers) {
        spec = PruneSpec{PruneLayers{*a.layers}, "layers"};
        m.settings["layers"] = std::to_string(*a.layers);
    } else {
        if (a.from_selection != "small" && a.from_selection != "large") {
            throw UsageError("--from-selection takes small or large");
        }
        if (a.selection_file.empty()) throw UsageError("--from-selection needs --selection <selection.txt>");
        const L3Selection sel = L3Selection::from_text(read_text_file(a.selection_file));
        const std::size_t k = a.from_selection == "small" ? sel.small_layer : sel.large_layer;
        spec = PruneSpec{PruneLayers{k}, "l3prune-" + a.from_selection};
        m.inputs.push_back(a.selection_file);
        m.settings["from_selection"] = a.from_selection;
    }
    m.write(out);
    const Transformer model = load_checkpoint(a.model);
    auto [pruned, report] = prune_layers(model, spec);
    save_checkpoint(pruned, out / "model.l3p");
    write_text_file(out / "prune_report.csv", PruneReport::csv_header() + "\n" + report.csv_row() + "\n");
    std::cout << report.layers_before << " -> " << report.layers_after << " layers, " << report.params_after << " of "
              << report.params_before << " parameters\n";
}

// --- sweep -----------------------------------------------------------------

struct SweepArgs {
    std::string model, out;
    std::vector<double> percents{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    bool write_models = false;
};

void cmd_sweep(const SweepArgs& a) {
    const fs::path out = a.out;
    RunManifest m{"sweep", "", 0, {}, {a.model}, {"prune_report.csv"}};
    std::ostringstream ps;
    for (double p : a.percents) ps << fmt(p) << ' ';
    m.settings["percents"] = ps.str();
    m.write(out);
    const Transformer model = load_checkpoint(a.model);
    std::string csv = PruneReport::csv_header() + "\n";
    for (const auto& r : sweep(model, a.percents)) {
        csv += r.csv_row() + "\n";
        if (a.write_models) {
            const auto pruned = prune_layers(model, PruneSpec{PrunePercent{r.percent}, "sweep"}).first;
            std::ostringstream name;
            name << "model_p" << std::lround(r.percent * 100) << ".l3p";
            save_checkpoint(pruned, out / name.str());
        }
    }
    write_text_file(out / "prune_report.csv", csv);
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string model, data, vocab, out, preset = "desk";
    std::optional<std::size_t> steps, batch, warmup, rank;
    std::optional<double> lr, alpha, temperature;
    std::vector<std::string> targets;
    std::optional<std::uint64_t> seed;
};

void cmd_train(const TrainArgs& a) {
    TrainConfig cfg;
    if (a.preset == "desk") {
        cfg = TrainConfig::desk();
    } else if (a.preset == "paper") {
        cfg = TrainConfig::paper();
    } else {
        throw UsageError("--preset takes desk or paper");
    }
    if (a.steps) cfg.steps = *a.steps;
    if (a.batch) cfg.batch_size = *a.batch;
    if (a.warmup) cfg.warmup_steps = *a.warmup;
    if (a.rank) cfg.lora_rank = *a.rank;
    if (a.lr) cfg.lr = *a.lr;
    if (a.alpha) cfg.lora_alpha = *a.alpha;
    if (a.temperature) cfg.temperature = *a.temperature;
    if (!a.targets.empty()) cfg.targets = a.targets;
    cfg.seed = resolve_seed(a.seed);
    // Overriding steps below the preset's warm-up shortens the warm-up with it.
    if (a.steps && !a.warmup && cfg.warmup_steps > cfg.steps) cfg.warmup_steps = cfg.steps;
    cfg.validate();

    const fs::path out = a.out;
    const fs::path vocab_path = default_vocab(a.vocab, a.data);
    RunManifest m{"train", "", cfg.seed, {{"preset", a.preset}, {"config", cfg.to_text()}},
                  {a.model, a.data, vocab_path}, {"model.l3p", "train_curve.csv", "train_curve.svg", "timing.json"}};
    m.write(out);

    const Transformer model = load_checkpoint(a.model);
    const Vocabulary vocab = Vocabulary::load(vocab_path);
    if (vocab.size() != model.config.vocab_size) throw DataError("mismatched vocabularies between model and data");
    const auto dataset = load_jsonl(a.data, vocab);
    AdaptedModel adapted = attach_lora(model, cfg.lora_rank, cfg.lora_alpha, cfg.targets, cfg.seed);
    const TrainCurve curve = train(adapted, dataset, cfg);
    const Transformer merged = merge(adapted);

    save_checkpoint(merged, out / "model.l3p");
    write_text_file(out / "train_curve.csv", curve.to_csv());
    PlotSeries s{"loss", {}, {}};
    for (const auto& p : curve.points) s.points.emplace_back(double(p.step), p.loss);
    write_text_file(out / "train_curve.svg", svg_plot("Training loss", "step", "contrastive loss", {s}));
    nlohmann::ordered_json timing;
    timing["steps"] = curve.points.size();
    timing["total_ms"] = curve.total_ms();
    timing["params"] = count_params(merged);
    timing["adapter_params"] = adapted.adapter_param_count();
    write_text_file(out / "timing.json", timing.dump(2) + "\n");
    std::cout << "trained " << cfg.steps << " steps, final loss " << (curve.points.empty() ? 0.0 : curve.points.back().loss)
              << ", " << curve.total_ms() / 1000.0 << " s\n";
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string model, suite, vocab, out, label;
};

void cmd_eval(const EvalArgs& a) {
    const fs::path out = a.out;
    const fs::path vocab_path = default_vocab(a.vocab, a.suite);
    RunManifest m{"eval", a.suite, 0, {}, {a.model, a.suite, vocab_path}, {"eval_report.csv"}};
    const fs::path timing_src = fs::path(a.model).parent_path() / "timing.json";
    if (fs::exists(timing_src)) m.outputs.push_back("timing.json");
    m.write(out);

    const Transformer model = load_checkpoint(a.model);
    const Vocabulary vocab = Vocabulary::load(vocab_path);
    nlohmann::json sj;
    try {
        sj = nlohmann::json::parse(read_text_file(a.suite));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("malformed suite file: ") + e.what());
    }
    const SuiteSpec spec = suite_from_json(sj, vocab);
    const std::string label = a.label.empty() ? fs::path(a.out).filename().string() : a.label;
    const EvalReport report = evaluate(model, build_suite(spec), label);
    write_text_file(out / "eval_report.csv", report.to_csv());
    if (fs::exists(timing_src)) write_text_file(out / "timing.json", read_text_file(timing_src));
    std::cout << label << ": score " << report.score() << " (" << report.layers << " layers, " << report.model_params
              << " params)\n";
}

// --- report ----------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> runs;
    std::string baseline, out;
};

void cmd_report(const ReportArgs& a) {
    if (a.runs.empty()) throw UsageError("report needs at least one run directory");
    const fs::path out = a.out;
    RunManifest m{"report", "", 0, {}, {}, {"score_vs_params.csv", "score_vs_params.svg", "variants.txt"}};
    for (const auto& r : a.runs) m.inputs.push_back(fs::path(r) / "eval_report.csv");
    m.write(out);

    std::vector<RunSummary> runs;
    for (const auto& dir : a.runs) {
        RunSummary s{EvalReport::from_csv(read_text_file(fs::path(dir) / "eval_report.csv")), std::nullopt};
        const fs::path timing = fs::path(dir) / "timing.json";
        if (fs::exists(timing)) s.train_ms = nlohmann::json::parse(read_text_file(timing)).at("total_ms").get<double>();
        runs.push_back(std::move(s));
    }
    std::size_t base = 0;
    if (!a.baseline.empty()) {
        bool found = false;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            if (runs[i].eval.label == a.baseline || fs::path(a.runs[i]) == fs::path(a.baseline)) {
                base = i;
                found = true;
            }
        }
        if (!found) throw UsageError("baseline " + a.baseline + " is not among the runs");
    }
    write_text_file(out / "score_vs_params.csv", score_vs_params_csv(runs));
    write_text_file(out / "score_vs_params.svg", score_vs_params_svg(runs));
    const std::string table = variants_table(runs, runs[base]);
    write_text_file(out / "variants.txt", table);
    std::cout << table;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"l3p: layerwise-loss pruning of decoder-only transformers into text encoders"};
    app.require_subcommand(1);

    InitArgs init;
    auto* c_init = app.add_subcommand("init", "create a randomly initialized checkpoint");
    c_init->add_option("--vocab", init.vocab, "vocabulary file (sets vocab size)");
    c_init->add_option("--vocab-size", init.vocab_size);
    c_init->add_option("--d-model", init.d_model)->capture_default_str();
    c_init->add_option("--layers", init.layers)->capture_default_str();
    c_init->add_option("--heads", init.heads)->capture_default_str();
    c_init->add_option("--d-ff", init.d_ff)->capture_default_str();
    c_init->add_option("--max-seq-len", init.max_seq_len)->capture_default_str();
    c_init->add_option("--seed", init.seed);
    c_init->add_option("--out", init.out, "output directory")->required();

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "generate a synthetic tuple corpus, vocabulary and eval suite");
    c_synth->add_option("--vocab-size", synth.spec.vocab_size)->capture_default_str();
    c_synth->add_option("--topics", synth.spec.n_topics)->capture_default_str();
    c_synth->add_option("--tuples", synth.spec.tuple_count)->capture_default_str();
    c_synth->add_option("--noise", synth.spec.noise_rate)->capture_default_str();
    c_synth->add_option("--query-len", synth.spec.query_len)->capture_default_str();
    c_synth->add_option("--doc-len", synth.spec.doc_len)->capture_default_str();
    c_synth->add_option("--suite-seed", synth.suite_seed)->capture_default_str();
    c_synth->add_option("--seed", synth.seed);
    c_synth->add_option("--out", synth.out)->required();

    ProfileArgs prof;
    auto* c_prof = app.add_subcommand("profile", "layerwise loss profile and prune point selection");
    c_prof->add_option("--model", prof.model)->required();
    c_prof->add_option("--data", prof.data)->required();
    c_prof->add_option("--vocab", prof.vocab, "defaults to vocab.txt next to --data");
    c_prof->add_option("--samples", prof.samples)->capture_default_str();
    c_prof->add_option("--batch", prof.batch)->capture_default_str();
    c_prof->add_option("--temperature", prof.temperature)->capture_default_str();
    c_prof->add_option("--seed", prof.seed);
    c_prof->add_option("--out", prof.out)->required();

    PruneArgs prune;
    auto* c_prune = app.add_subcommand("prune", "drop trailing layers");
    c_prune->add_option("--model", prune.model)->required();
    c_prune->add_option("--percent", prune.percent, "fraction of layers to remove, in [0, 1)");
    c_prune->add_option("--layers", prune.layers, "number of layers to keep");
    c_prune->add_option("--from-selection", prune.from_selection, "small or large");
    c_prune->add_option("--selection", prune.selection_file, "selection.txt written by profile");
    c_prune->add_option("--out", prune.out)->required();

    SweepArgs sweep_args;
    auto* c_sweep = app.add_subcommand("sweep", "prune reports over a range of percentages");
    c_sweep->add_option("--model", sweep_args.model)->required();
    c_sweep->add_option("--percents", sweep_args.percents)->delimiter(',')->capture_default_str();
    c_sweep->add_flag("--write-models", sweep_args.write_models);
    c_sweep->add_option("--out", sweep_args.out)->required();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "contrastive low-rank adapter finetuning");
    c_train->add_option("--model", tr.model)->required();
    c_train->add_option("--data", tr.data)->required();
    c_train->add_option("--vocab", tr.vocab, "defaults to vocab.txt next to --data");
    c_train->add_option("--preset", tr.preset, "desk or paper")->capture_default_str();
    c_train->add_option("--steps", tr.steps);
    c_train->add_option("--batch", tr.batch);
    c_train->add_option("--lr", tr.lr);
    c_train->add_option("--warmup", tr.warmup);
    c_train->add_option("--rank", tr.rank);
    c_train->add_option("--alpha", tr.alpha);
    c_train->add_option("--temperature", tr.temperature);
    c_train->add_option("--targets", tr.targets, "projection names, e.g. wq,wv or layers.0.wq")->delimiter(',');
    c_train->add_option("--seed", tr.seed);
    c_train->add_option("--out", tr.out)->required();

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "score a checkpoint on an eval suite");
    c_eval->add_option("--model", ev.model)->required();
    c_eval->add_option("--suite", ev.suite)->required();
    c_eval->add_option("--vocab", ev.vocab, "defaults to vocab.txt next to --suite");
    c_eval->add_option("--label", ev.label, "run label (defaults to the output directory name)");
    c_eval->add_option("--out", ev.out)->required();

    ReportArgs rep;
    auto* c_report = app.add_subcommand("report", "join eval runs into score-vs-params and variant tables");
    c_report->add_option("--runs", rep.runs, "eval output directories")->required();
    c_report->add_option("--baseline", rep.baseline, "baseline run label or directory (default: first run)");
    c_report->add_option("--out", rep.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (c_init->parsed()) cmd_init(init);
        if (c_synth->parsed()) cmd_synth(synth);
        if (c_prof->parsed()) cmd_profile(prof);
        if (c_prune->parsed()) cmd_prune(prune);
        if (c_sweep->parsed()) cmd_sweep(sweep_args);
        if (c_train->parsed()) cmd_train(tr);
        if (c_eval->parsed()) cmd_eval(ev);
        if (c_report->parsed()) cmd_report(rep);
    } catch (const l3p::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
