#include "oodscope/detector_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "oodscope/error.hpp"

namespace oodscope {

using json = nlohmann::json;

std::vector<std::uint8_t> decide(std::span<const double> scores, double threshold) {
    if (!std::isfinite(threshold)) throw ValidationError("threshold must be finite");
    std::vector<std::uint8_t> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1 : 0;
    return out;
}

double calibrate_threshold(std::span<const double> id_scores, double target_id_rate) {
    if (id_scores.empty()) throw ValidationError("calibrate_threshold: no ID scores");
    if (!(target_id_rate > 0.0 && target_id_rate < 1.0)) throw ValidationError("target ID rate must lie in (0, 1)");
    std::vector<double> sorted(id_scores.begin(), id_scores.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    // The 1e-9 slack absorbs representation noise in products like 0.95 * 20.
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(target_id_rate * n - 1e-9)), 1,
                                           sorted.size());
    return std::nextafter(sorted[k - 1], std::numeric_limits<double>::infinity());
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
    if (id_scores.empty() || ood_scores.empty()) throw ValidationError("auroc: both sides need at least one score");
    struct Item {
        double score;
        bool ood;
    };
    std::vector<Item> all;
    all.reserve(id_scores.size() + ood_scores.size());
    for (double s : id_scores) all.push_back({s, false});
    for (double s : ood_scores) all.push_back({s, true});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

    // Twice the OOD rank sum; midranks of tie groups are half-integers, so
    // everything stays integral.
    std::uint64_t twice_rank_sum = 0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        std::size_t ood_in_group = 0;
        while (j < all.size() && all[j].score == all[i].score) {
            ood_in_group += all[j].ood ? 1 : 0;
            ++j;
        }
        // ranks i+1 .. j, midrank (i + 1 + j) / 2
        twice_rank_sum += static_cast<std::uint64_t>(ood_in_group) * (i + 1 + j);
        i = j;
    }
    const std::uint64_t n_ood = ood_scores.size();
    const std::uint64_t n_id = id_scores.size();
    const std::uint64_t twice_u = twice_rank_sum - n_ood * (n_ood + 1);
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_ood) * static_cast<double>(n_id));
}

double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double rate) {
    if (ood_scores.empty()) throw ValidationError("fpr_at_tpr: no OOD scores");
    const double threshold = calibrate_threshold(id_scores, rate);
    const auto kept = std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s < threshold; });
    return static_cast<double>(kept) / static_cast<double>(ood_scores.size());
}

IdRecognition id_recognition(const SimilarityMatrix& sims, const LabelVector& labels, Temperature tau) {
    if (labels.size() != sims.samples()) throw ValidationError("label count does not match similarity rows");
    if (labels.num_classes() > static_cast<int>(sims.categories())) {
        throw ValidationError("labels reference more categories than the similarity matrix has");
    }
    IdRecognition out;
    const auto predicted = predict_argmax(sims);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
    out.top1_accuracy = labels.size() ? static_cast<double>(correct) / static_cast<double>(labels.size()) : 0.0;

    std::vector<std::vector<double>> probs(sims.samples());
    for (std::size_t i = 0; i < sims.samples(); ++i) probs[i] = softmax(sims.row(i), tau);

    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < sims.categories(); ++c) {
        std::vector<double> pos, neg;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            (labels[i] == static_cast<int>(c) ? pos : neg).push_back(probs[i][c]);
        }
        if (pos.empty() || neg.empty()) continue;
        sum += auroc(neg, pos);
        ++counted;
    }
    if (counted == 0) {
        out.auroc_error = "AUROC undefined: labels span fewer than 2 categories";
    } else {
        out.macro_ovr_auroc = sum / static_cast<double>(counted);
    }
    return out;
}

// --- histogram -----------------------------------------------------------------

double Histogram::left(std::size_t b) const {
    return lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(counts.size());
}

double Histogram::right(std::size_t b) const { return b + 1 == counts.size() ? hi : left(b + 1); }

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::string Histogram::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "bin_left,bin_right,count\n";
    for (std::size_t b = 0; b < counts.size(); ++b) os << left(b) << ',' << right(b) << ',' << counts[b] << '\n';
    return os.str();
}

json Histogram::to_json() const {
    json edges = json::array();
    for (std::size_t b = 0; b <= counts.size(); ++b) edges.push_back(b == counts.size() ? hi : left(b));
    return json{{"lo", lo}, {"hi", hi}, {"edges", edges}, {"counts", counts}};
}

Histogram score_histogram(std::span<const double> scores, std::size_t bins,
                          std::optional<std::pair<double, double>> range) {
    if (scores.empty()) throw ValidationError("score_histogram: no scores");
    if (bins < 1) throw ValidationError("score_histogram: bins must be >= 1");
    Histogram h;
    if (range) {
        h.lo = range->first;
        h.hi = range->second;
        if (!(h.lo < h.hi) || !std::isfinite(h.lo) || !std::isfinite(h.hi)) {
            throw ValidationError("score_histogram: range must be finite with lo < hi");
        }
    } else {
        const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
        h.lo = *mn;
        h.hi = *mx;
        if (h.lo == h.hi) {
            h.lo -= 0.5;
            h.hi += 0.5;
        }
    }
    h.counts.assign(bins, 0);
    const double width = h.hi - h.lo;
    for (double x : scores) {
        std::size_t b = 0;
        if (x >= h.hi) {
            b = bins - 1;
        } else if (x > h.lo) {
            b = std::min(bins - 1, static_cast<std::size_t>((x - h.lo) / width * static_cast<double>(bins)));
            // snap to the stored edges so bin membership is left <= x < right
            while (b > 0 && x < h.left(b)) --b;
            while (b + 1 < bins && x >= h.left(b + 1)) ++b;
        }
        ++h.counts[b];
    }
    return h;
}

// --- evaluation ----------------------------------------------------------------

const SplitMetrics* EvalReport::split(SplitRole role) const {
    for (const auto& s : ood)
        if (s.role == role) return &s;
    return nullptr;
}

json EvalReport::to_json() const {
    json doc;
    doc["label"] = label;
    doc["scorer"] = scorer;
    doc["params"] = params;
    doc["prompts"] = prompts;
    doc["positive_class"] = "ood";
    doc["score_orientation"] = "higher = more OOD";
    doc["fpr_convention"] = "threshold keeps 95% of id_test; FPR = fraction of OOD below threshold";
    doc["threshold"] = threshold;
    json id;
    id["samples"] = id_samples;
    if (id_top1) id["top1_accuracy"] = *id_top1;
    if (id_macro_auroc) id["macro_ovr_auroc"] = *id_macro_auroc;
    doc["id"] = id;
    json o = json::object();
    for (const auto& s : ood) o[split_name(s.role)] = {{"samples", s.samples}, {"auroc", s.auroc}, {"fpr95", s.fpr95}};
    doc["ood"] = o;
    json hists = json::object();
    for (const auto& [role, h] : histograms) hists[split_name(role)] = h.to_json();
    doc["histograms"] = hists;
    return doc;
}

const EmbeddingMatrix* LoadedBenchmark::find(SplitRole role) const {
    for (const auto& [r, m] : splits)
        if (r == role) return &m;
    return nullptr;
}

LoadedBenchmark load_benchmark(const std::filesystem::path& manifest_path) {
    BenchmarkManifest manifest = load_manifest(manifest_path);
    const auto violations = validate_manifest(manifest);
    if (!violations.empty()) {
        std::string msg = "manifest '" + manifest_path.string() + "' is invalid:";
        for (const auto& v : violations) msg += "\n  - " + v;
        throw ValidationError(msg);
    }
    PromptHierarchy hierarchy = load_hierarchy(manifest.resolve(manifest.hierarchy));
    LoadedBenchmark bench{std::move(manifest), std::move(hierarchy), {}, std::nullopt, std::nullopt};
    const int m = static_cast<int>(bench.hierarchy.num_classes());
    for (const auto& [role, ref] : bench.manifest.splits) {
        EmbeddingMatrix emb = load_embeddings(bench.manifest.resolve(ref.embeddings));
        if (!emb.unit_norm()) emb = l2_normalize(emb);
        if (ref.labels) {
            auto labels = load_labels(bench.manifest.resolve(*ref.labels), m);
            if (role == SplitRole::IdTest) bench.id_test_labels = std::move(labels);
            if (role == SplitRole::IdTrain) bench.id_train_labels = std::move(labels);
        }
        bench.splits.emplace_back(role, std::move(emb));
    }
    return bench;
}

EvalReport evaluate(const LoadedBenchmark& bench, const ScorerSpec& spec, const ClassTextEmbeddings& texts,
                    const EvalOptions& options) {
    const EmbeddingMatrix* id = bench.find(SplitRole::IdTest);
    if (!id) throw ValidationError("benchmark has no id_test split");

    EvalReport report;
    report.label = spec.label(texts.num_levels());
    report.scorer = scorer_name(spec.kind);
    report.params = spec.params(texts.num_levels());
    report.id_samples = id->n();

    const ScoreVector id_scores = compute_scores(spec, *id, texts);
    report.threshold = calibrate_threshold(id_scores.scores, options.tpr);
    if (bench.id_test_labels) {
        const auto rec = id_recognition(scorer_similarities(spec, *id, texts), *bench.id_test_labels, Temperature(spec.tau));
        report.id_top1 = rec.top1_accuracy;
        report.id_macro_auroc = rec.macro_ovr_auroc;
    }

    std::vector<std::pair<SplitRole, std::vector<double>>> all_scores;
    all_scores.emplace_back(SplitRole::IdTest, id_scores.scores);
    for (SplitRole role : all_split_roles()) {
        if (!is_ood(role)) continue;
        const EmbeddingMatrix* split = bench.find(role);
        if (!split) continue;
        const ScoreVector s = compute_scores(spec, *split, texts);
        report.ood.push_back({role, split->n(), auroc(id_scores.scores, s.scores),
                              fpr_at_tpr(id_scores.scores, s.scores, options.tpr)});
        all_scores.emplace_back(role, s.scores);
    }

    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& [role, s] : all_scores) {
        const auto [mn, mx] = std::minmax_element(s.begin(), s.end());
        lo = std::min(lo, *mn);
        hi = std::max(hi, *mx);
    }
    if (lo == hi) {
        lo -= 0.5;
        hi += 0.5;
    }
    for (const auto& [role, s] : all_scores) {
        report.histograms.emplace_back(role, score_histogram(s, options.histogram_bins, std::make_pair(lo, hi)));
    }
    return report;
}

std::vector<EvalReport> run_full_spectrum_eval(const LoadedBenchmark& bench, const std::vector<ScorerSpec>& scorers,
                                               const EvalOptions& options) {
    const ClassTextEmbeddings texts = build_class_text_matrix(bench.hierarchy);
    std::vector<EvalReport> out;
    out.reserve(scorers.size());
    for (const auto& spec : scorers) out.push_back(evaluate(bench, spec, texts, options));
    return out;
}

std::vector<EvalReport> run_full_spectrum_eval(const std::filesystem::path& manifest_path,
                                               const std::vector<ScorerSpec>& scorers, const EvalOptions& options) {
    return run_full_spectrum_eval(load_benchmark(manifest_path), scorers, options);
}

json reports_to_json(const std::vector<EvalReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    return json{{"reports", arr}};
}

std::string format_table(const std::vector<EvalReport>& reports, bool color) {
    const std::vector<std::pair<SplitRole, std::string>> cols = {
        {SplitRole::OodSemantic, "S"}, {SplitRole::OodCovariate, "C"}, {SplitRole::OodFar, "I"}};
    std::size_t label_width = 6;
    for (const auto& r : reports) label_width = std::max(label_width, r.label.size());

    auto pct = [](std::optional<double> v) {
        if (!v) return std::string("-");
        std::ostringstream os;
        os << std::fixed << std::setprecision(1) << 100.0 * *v;
        return os.str();
    };

    std::ostringstream os;
    const char* bold = color ? "\033[1m" : "";
    const char* reset = color ? "\033[0m" : "";
    os << bold << std::left << std::setw(static_cast<int>(label_width)) << "Method" << std::right;
    os << " | " << std::setw(6) << "ID-Acc" << ' ' << std::setw(8) << "ID-AUROC" << " |";
    for (const auto& [role, name] : cols) os << ' ' << std::setw(6) << name;
    os << reset << '\n';
    os << std::string(label_width, '-') << "-+-" << std::string(15, '-') << "-+" << std::string(7 * cols.size(), '-')
       << '\n';
    for (const auto& r : reports) {
        os << std::left << std::setw(static_cast<int>(label_width)) << r.label << std::right;
        os << " | " << std::setw(6) << pct(r.id_top1) << ' ' << std::setw(8) << pct(r.id_macro_auroc) << " |";
        for (const auto& [role, name] : cols) {
            const SplitMetrics* s = r.split(role);
            os << ' ' << std::setw(6) << pct(s ? std::optional<double>(s->auroc) : std::nullopt);
        }
        os << '\n';
    }
    os << "* AUROC (%), OOD = positive class. S: semantic shift; C: covariate shift; I: far OOD.\n";
    return os.str();
}

}  // namespace oodscope
