#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodscope/detector_metrics.hpp"
#include "oodscope/embedding_store.hpp"
#include "oodscope/error.hpp"
#include "oodscope/fewshot_tuner.hpp"
#include "oodscope/prompt_hierarchy.hpp"
#include "oodscope/scoring.hpp"
#include "oodscope/synthetic_bench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oodscope;

namespace {

enum Exit { kOk = 0, kValidation = 1, kIo = 2 };

json read_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config '" + path + "': invalid JSON: " + e.what());
    }
    if (!doc.is_object()) throw ValidationError("config '" + path + "': expected a JSON object");
    return doc;
}

// A config file is either flat or has per-subcommand sections, matching the
// echoed config ({"synth": {...}} / {"tuner": {...}}).
json section(const json& file, const char* name) {
    if (file.contains(name)) return file.at(name);
    return file;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path() && !fs::exists(path.parent_path()))
        throw IoError("directory does not exist: '" + path.parent_path().string() + "'");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        write_file(path, text);
}

void echo_config(const std::string& command, const json& resolved) {
    std::cerr << json{{"command", command}, {"config", resolved}}.dump() << "\n";
}

bool use_color() {
    if (std::getenv("OODSCOPE_NO_COLOR") != nullptr) return false;
    return isatty(fileno(stdout)) != 0;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& flag) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        long long v = 0;
        try {
            v = std::stoll(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size() || v < 0) throw ValidationError(flag + ": not a non-negative integer: '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

// Scorer flags shared by score / eval / tune / sweep.
struct ScorerFlags {
    std::vector<std::string> names{"mcm"};
    double tau = kDefaultTau;
    std::size_t levels = 0;
    std::string aggregation = "mean";
    std::vector<double> weights;

    void add(CLI::App* app, bool multiple) {
        if (multiple)
            app->add_option("--scorer", names,
                            "Scorer(s): max_logit, energy, mcm, msp, gl_mcm, hier_mcm (repeatable)")
                ->delimiter(',');
        else
            app->add_option("--scorer", names.front(), "Scorer: max_logit, energy, mcm, msp, gl_mcm, hier_mcm");
        app->add_option("--tau", tau, "Softmax temperature (energy: T)");
        app->add_option("--levels", levels, "Hierarchy levels used by hier_mcm (0 = all)");
        app->add_option("--aggregation", aggregation, "Level aggregation: mean, max, weighted");
        app->add_option("--weights", weights, "Per-level weights for weighted aggregation")->delimiter(',');
    }

    std::vector<ScorerSpec> specs() const {
        std::vector<ScorerSpec> out;
        Temperature{tau};
        for (const auto& name : names) {
            ScorerSpec s;
            s.kind = parse_scorer(name);
            s.tau = tau;
            s.levels = levels;
            s.aggregation.mode = parse_aggregation(aggregation);
            s.aggregation.weights = weights;
            out.push_back(s);
        }
        return out;
    }

    json to_json() const {
        return json{{"scorers", names}, {"tau", tau}, {"levels", levels}, {"aggregation", aggregation},
                    {"weights", weights}};
    }
};

// Tuner flags; explicit flags override the config file.
struct TunerFlags {
    TunerConfig cfg;
    std::string optimizer = "adam";
    std::vector<CLI::Option*> opts;

    void add(CLI::App* app) {
        opts.push_back(app->add_option("--shots", cfg.shots, "Samples per class"));
        opts.push_back(app->add_option("--epochs", cfg.epochs, "Full-batch optimizer steps"));
        opts.push_back(app->add_option("--lr", cfg.learning_rate, "Learning rate"));
        opts.push_back(app->add_option("--train-tau", cfg.tau, "Training softmax temperature"));
        opts.push_back(app->add_option("--locoop-weight", cfg.locoop_weight, "Patch entropy regularization weight"));
        opts.push_back(app->add_option("--topk", cfg.topk, "Top-K for ID-irrelevant patch selection"));
        opts.push_back(app->add_option("--optimizer", optimizer, "adam or sgd"));
    }

    TunerConfig resolve(const json& file, std::optional<std::uint64_t> seed) const {
        TunerConfig out = TunerConfig::from_json(section(file, "tuner"), TunerConfig{});
        json over = json::object();
        const char* keys[] = {"shots", "epochs", "lr", "tau", "locoop_weight", "topk", "optimizer"};
        const json flags = cfg.to_json();
        for (std::size_t i = 0; i < opts.size(); ++i) {
            if (opts[i]->count() == 0) continue;
            over[keys[i]] = std::string(keys[i]) == "optimizer" ? json(optimizer) : flags[keys[i]];
        }
        out = TunerConfig::from_json(over, out);
        if (seed) out.seed = *seed;
        out.validate();
        return out;
    }
};

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ValidationError(std::string(flag) + " is required");
}

EmbeddingMatrix load_unit(const fs::path& path) {
    EmbeddingMatrix m = load_embeddings(path);
    return m.unit_norm() ? m : l2_normalize(m);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oodscope: zero-shot and few-shot OOD detection over joint image/text embeddings"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<std::uint64_t> seed;
    std::string config_path;
    app.add_option("--seed", seed, "Global seed (overrides config and subcommand seeds)");
    app.add_option("--config", config_path, "JSON config file; explicit flags take precedence");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic full-spectrum benchmark");
    SynthConfig synth_flags;
    double level_signal = synth_flags.level_signal.front();
    std::string synth_out;
    std::vector<std::pair<const char*, CLI::Option*>> synth_opts;
    synth->add_option("--out", synth_out, "Output directory")->group("Required");
    synth_opts.emplace_back("d", synth->add_option("--d", synth_flags.d, "Embedding dimension"));
    synth_opts.emplace_back("M", synth->add_option("--classes", synth_flags.num_classes, "ID categories M"));
    synth_opts.emplace_back("L", synth->add_option("--levels", synth_flags.levels, "Prompt hierarchy levels L"));
    synth_opts.emplace_back("samples_per_split",
                            synth->add_option("--samples", synth_flags.samples_per_split, "Samples per split"));
    synth_opts.emplace_back("sigma_id", synth->add_option("--sigma-id", synth_flags.sigma_id, "ID noise scale"));
    synth_opts.emplace_back("covariate_shift",
                            synth->add_option("--covariate-shift", synth_flags.covariate_shift, "Covariate shift magnitude"));
    synth_opts.emplace_back("covariate_noise_inflation",
                            synth->add_option("--noise-inflation", synth_flags.covariate_noise_inflation,
                                              "Covariate noise inflation factor"));
    synth_opts.emplace_back("covariate_attenuation",
                            synth->add_option("--attenuation", synth_flags.covariate_attenuation,
                                              "Level-signal attenuation in the covariate split"));
    synth_opts.emplace_back("level_signal",
                            synth->add_option("--level-signal", level_signal, "Level signal (all levels >= 1)"));
    synth_opts.emplace_back("patches", synth->add_option("--patches", synth_flags.patches, "Patches per sample"));

    // score
    auto* score = app.add_subcommand("score", "Score embeddings against a prompt hierarchy");
    std::string score_emb, score_hier, score_out;
    ScorerFlags score_flags;
    score->add_option("--embeddings", score_emb, "OSEM image embeddings")->group("Required");
    score->add_option("--hierarchy", score_hier, "Prompt hierarchy JSON")->group("Required");
    score->add_option("--out", score_out, "Score JSON output (- = stdout)");
    score_flags.add(score, false);

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "Threshold that keeps a target fraction of ID scores");
    std::string cal_scores, cal_out;
    double cal_rate = 0.95;
    calibrate->add_option("--scores", cal_scores, "ID score JSON")->group("Required");
    calibrate->add_option("--rate", cal_rate, "Target ID retention rate");
    calibrate->add_option("--out", cal_out, "Detector JSON output (- = stdout)");

    // eval
    auto* eval = app.add_subcommand("eval", "Full-spectrum evaluation of one or more scorers");
    std::string eval_manifest, eval_json;
    std::size_t eval_bins = 50;
    ScorerFlags eval_flags;
    eval->add_option("--manifest", eval_manifest, "Benchmark manifest JSON")->group("Required");
    eval->add_option("--json", eval_json, "Report JSON output");
    eval->add_option("--bins", eval_bins, "Histogram bins per split");
    eval_flags.add(eval, true);

    // tune
    auto* tune = app.add_subcommand("tune", "Few-shot prompt tuning on id_train");
    std::string tune_manifest, tune_hier_out, tune_trace, tune_report;
    TunerFlags tune_flags;
    ScorerFlags tune_scorer;
    tune->add_option("--manifest", tune_manifest, "Benchmark manifest JSON")->group("Required");
    tune->add_option("--out-hierarchy", tune_hier_out, "Tuned prompts as a one-level hierarchy JSON")->group("Required");
    tune->add_option("--trace", tune_trace, "Loss trace CSV output");
    tune->add_option("--report", tune_report, "Evaluate the tuned prompts and write report JSON");
    tune_flags.add(tune);
    tune_scorer.add(tune, false);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Tune at several shot counts and evaluate each");
    std::string sweep_manifest, sweep_out, sweep_shots = "1,5,10,25,50";
    TunerFlags sweep_flags;
    ScorerFlags sweep_scorer;
    sweep->add_option("--manifest", sweep_manifest, "Benchmark manifest JSON")->group("Required");
    sweep->add_option("--shot-list", sweep_shots, "Comma-separated shot counts");
    sweep->add_option("--out", sweep_out, "CSV output (- = stdout)");
    sweep_flags.add(sweep);
    sweep_scorer.add(sweep, false);

    // hist
    auto* hist = app.add_subcommand("hist", "Score histogram as CSV");
    std::string hist_scores, hist_out;
    std::size_t hist_bins = 50;
    std::optional<double> hist_lo, hist_hi;
    hist->add_option("--scores", hist_scores, "Score JSON")->group("Required");
    hist->add_option("--bins", hist_bins, "Number of bins");
    hist->add_option("--lo", hist_lo, "Range lower edge (default: data min)");
    hist->add_option("--hi", hist_hi, "Range upper edge (default: data max)");
    hist->add_option("--out", hist_out, "CSV output (- = stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    }

    try {
        const json file = read_config_file(config_path);

        if (synth->parsed()) {
            require(synth_out, "--out");
            json over = json::object();
            json flag_values = synth_flags.to_json();
            for (const auto& [key, opt] : synth_opts) {
                if (opt->count() == 0) continue;
                over[key] = std::string(key) == "level_signal" ? json(level_signal) : flag_values[key];
            }
            SynthConfig cfg = SynthConfig::from_json(over, SynthConfig::from_json(section(file, "synth"), SynthConfig{}));
            if (seed) cfg.seed = *seed;
            cfg.validate();
            echo_config("synth", json{{"out", synth_out}, {"synth", cfg.to_json()}});
            const fs::path manifest = generate_benchmark(cfg, synth_out);
            std::cout << manifest.string() << "\n";
        } else if (score->parsed()) {
            require(score_emb, "--embeddings");
            require(score_hier, "--hierarchy");
            const auto spec = score_flags.specs().front();
            echo_config("score", json{{"embeddings", score_emb}, {"hierarchy", score_hier}, {"scorer", score_flags.to_json()}});
            const EmbeddingMatrix images = load_unit(score_emb);
            const ClassTextEmbeddings texts = build_class_text_matrix(load_hierarchy(score_hier));
            const ScoreVector s = compute_scores(spec, images, texts);
            emit(score_out, to_json(s).dump(2) + "\n");
        } else if (calibrate->parsed()) {
            require(cal_scores, "--scores");
            if (!(cal_rate > 0.0 && cal_rate < 1.0)) throw ValidationError("--rate must be in (0, 1)");
            echo_config("calibrate", json{{"scores", cal_scores}, {"rate", cal_rate}});
            const ScoreVector s = load_scores(cal_scores);
            const double threshold = calibrate_threshold(s.scores, cal_rate);
            std::size_t flagged = 0;
            for (auto f : decide(s, threshold)) flagged += f;
            const json doc{{"scorer", s.scorer}, {"params", s.params}, {"threshold", threshold},
                           {"rate", cal_rate},   {"n", s.size()},      {"flagged", flagged}};
            emit(cal_out, doc.dump(2) + "\n");
        } else if (eval->parsed()) {
            require(eval_manifest, "--manifest");
            const auto specs = eval_flags.specs();
            if (eval_bins == 0) throw ValidationError("--bins must be >= 1");
            echo_config("eval", json{{"manifest", eval_manifest}, {"bins", eval_bins}, {"scorer", eval_flags.to_json()}});
            EvalOptions opts;
            opts.histogram_bins = eval_bins;
            const auto bench = load_benchmark(eval_manifest);
            const auto reports = run_full_spectrum_eval(bench, specs, opts);
            if (!eval_json.empty()) write_file(eval_json, reports_to_json(reports).dump(2) + "\n");
            std::cout << format_table(reports, use_color());
        } else if (tune->parsed()) {
            require(tune_manifest, "--manifest");
            require(tune_hier_out, "--out-hierarchy");
            const TunerConfig cfg = tune_flags.resolve(file, seed);
            const auto spec = tune_scorer.specs().front();
            echo_config("tune", json{{"manifest", tune_manifest}, {"tuner", cfg.to_json()}, {"scorer", tune_scorer.to_json()}});
            const auto bench = load_benchmark(tune_manifest);
            const TrainResult result = tune_on_benchmark(bench, cfg);
            std::vector<std::string> names;
            for (const auto& c : bench.hierarchy.classes()) names.push_back(c.name);
            const PromptHierarchy tuned = hierarchy_from_matrix(scoring_prompts(result.prompts), names,
                                                                "tuned " + std::to_string(cfg.shots) + "-shot");
            std::vector<EvalReport> reports;
            if (!tune_report.empty()) {
                EvalReport r = evaluate(bench, spec, build_class_text_matrix(tuned));
                r.prompts = "tuned " + std::to_string(cfg.shots) + "-shot";
                reports.push_back(std::move(r));
            }
            save_hierarchy(tuned, tune_hier_out);
            if (!tune_trace.empty()) write_file(tune_trace, trace_to_csv(result.trace));
            if (!tune_report.empty()) {
                write_file(tune_report, reports_to_json(reports).dump(2) + "\n");
                std::cout << format_table(reports, use_color());
            }
        } else if (sweep->parsed()) {
            require(sweep_manifest, "--manifest");
            const TunerConfig cfg = sweep_flags.resolve(file, seed);
            const auto shots = parse_size_list(sweep_shots, "--shot-list");
            const auto spec = sweep_scorer.specs().front();
            echo_config("sweep", json{{"manifest", sweep_manifest}, {"shot_list", shots}, {"tuner", cfg.to_json()},
                                      {"scorer", sweep_scorer.to_json()}});
            const auto bench = load_benchmark(sweep_manifest);
            emit(sweep_out, sweep_to_csv(shots_sweep(bench, cfg, shots, spec)));
        } else if (hist->parsed()) {
            require(hist_scores, "--scores");
            if (hist_bins == 0) throw ValidationError("--bins must be >= 1");
            if (hist_lo.has_value() != hist_hi.has_value()) throw ValidationError("--lo and --hi must be given together");
            std::optional<std::pair<double, double>> range;
            if (hist_lo) {
                if (!(*hist_lo < *hist_hi)) throw ValidationError("--lo must be below --hi");
                range = std::make_pair(*hist_lo, *hist_hi);
            }
            json echo{{"scores", hist_scores}, {"bins", hist_bins}};
            if (range) echo["range"] = {range->first, range->second};
            echo_config("hist", echo);
            const ScoreVector s = load_scores(hist_scores);
            emit(hist_out, score_histogram(s.scores, hist_bins, range).to_csv());
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    }
    return kOk;
}
