#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oodscope/embedding_store.hpp"
#include "oodscope/prompt_hierarchy.hpp"
#include "oodscope/scoring.hpp"

namespace oodscope {

/// Eq. 3 style threshold detector: 1 (OOD) iff score >= threshold.
struct Detector {
    std::string scorer;
    nlohmann::json params = nlohmann::json::object();
    double threshold = 0.0;
};

std::vector<std::uint8_t> decide(std::span<const double> scores, double threshold);
inline std::vector<std::uint8_t> decide(const ScoreVector& s, double threshold) { return decide(s.scores, threshold); }
inline std::vector<std::uint8_t> decide(const ScoreVector& s, const Detector& d) { return decide(s.scores, d.threshold); }

/// Nearest-rank threshold on ID scores. With k = ceil(rate * n) and s_(k)
/// the k-th smallest score, returns the next double above s_(k), so at
/// least k ID scores fall strictly below the threshold and `decide` flags
/// at most n - k of them.
double calibrate_threshold(std::span<const double> id_scores, double target_id_rate);

/// Mann-Whitney AUROC with OOD as the positive class; ties count 1/2.
/// Midrank rank-sum, O((n_id + n_ood) log).
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Fraction of OOD scores below the threshold that keeps `rate` of ID.
double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores, double rate = 0.95);

struct IdRecognition {
    double top1_accuracy = 0.0;
    std::optional<double> macro_ovr_auroc;  // unset when fewer than 2 categories are present
    std::string auroc_error;
};

/// Top-1 accuracy and macro one-vs-rest AUROC of per-class softmax probability.
IdRecognition id_recognition(const SimilarityMatrix& sims, const LabelVector& labels, Temperature tau);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;

    std::size_t bins() const noexcept { return counts.size(); }
    double left(std::size_t b) const;
    double right(std::size_t b) const;
    std::size_t total() const;

    std::string to_csv() const;
    nlohmann::json to_json() const;
};

/// Equal-width bins over `range` (default: data min/max). Values outside an
/// explicit range land in the edge bins so the counts always sum to n.
Histogram score_histogram(std::span<const double> scores, std::size_t bins,
                          std::optional<std::pair<double, double>> range = std::nullopt);

// --- full-spectrum evaluation ---------------------------------------------------

struct SplitMetrics {
    SplitRole role;
    std::size_t samples = 0;
    double auroc = 0.0;
    double fpr95 = 0.0;
};

struct EvalReport {
    std::string label;
    std::string scorer;
    nlohmann::json params = nlohmann::json::object();
    std::string prompts = "zero-shot";
    double threshold = 0.0;  // calibrated at 95% ID retention on id_test
    std::size_t id_samples = 0;
    std::optional<double> id_top1;
    std::optional<double> id_macro_auroc;
    std::vector<SplitMetrics> ood;
    std::vector<std::pair<SplitRole, Histogram>> histograms;

    const SplitMetrics* split(SplitRole role) const;
    nlohmann::json to_json() const;
};

struct EvalOptions {
    std::size_t histogram_bins = 50;
    double tpr = 0.95;
};

/// Data for one evaluation: loaded, unit-normalized splits and class text.
struct LoadedBenchmark {
    BenchmarkManifest manifest;
    PromptHierarchy hierarchy;
    std::vector<std::pair<SplitRole, EmbeddingMatrix>> splits;
    std::optional<LabelVector> id_test_labels;
    std::optional<LabelVector> id_train_labels;

    const EmbeddingMatrix* find(SplitRole role) const;
};

/// Loads and validates a manifest; throws ValidationError listing violations.
LoadedBenchmark load_benchmark(const std::filesystem::path& manifest_path);

EvalReport evaluate(const LoadedBenchmark& bench, const ScorerSpec& spec, const ClassTextEmbeddings& texts,
                    const EvalOptions& options = {});

/// One report per scorer, in the given order.
std::vector<EvalReport> run_full_spectrum_eval(const LoadedBenchmark& bench, const std::vector<ScorerSpec>& scorers,
                                               const EvalOptions& options = {});
std::vector<EvalReport> run_full_spectrum_eval(const std::filesystem::path& manifest_path,
                                               const std::vector<ScorerSpec>& scorers, const EvalOptions& options = {});

nlohmann::json reports_to_json(const std::vector<EvalReport>& reports);
/// Aligned text table: one row per scorer, AUROC columns S / C / I.
std::string format_table(const std::vector<EvalReport>& reports, bool color = false);

}  // namespace oodscope
