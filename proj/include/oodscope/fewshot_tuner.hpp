#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "oodscope/detector_metrics.hpp"
#include "oodscope/embedding_store.hpp"
#include "oodscope/matrix.hpp"
#include "oodscope/scoring.hpp"

// Few-shot prompt tuning in the joint embedding space.
//
// The class-text vectors themselves are the parameters (there is no text
// encoder to backpropagate through). Objective for prompts P (M x d), unit
// image embeddings v_i with labels y_i and temperature tau:
//
//   CE    = mean_i -log softmax(P v_i / tau)_{y_i}
//   L_ood = mean over ID-irrelevant patches u of (log M - H(softmax(P u / tau)))
//   L     = CE + locoop_weight * L_ood
//
// A patch is ID-irrelevant when its sample's true label is not among the
// patch's top-K predicted categories. The selection is recomputed once per
// step and held fixed while differentiating.
namespace oodscope {

enum class OptimizerKind { Sgd, Adam };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TunerConfig {
    std::size_t shots = 50;
    std::size_t epochs = 100;
    double learning_rate = 1e-2;
    double tau = kDefaultTau;
    double locoop_weight = 0.0;
    std::size_t topk = 3;
    std::uint64_t seed = 42;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool unit_norm = true;

    /// Throws ValidationError; epochs = 0 is allowed (returns the init).
    void validate() const;
    nlohmann::json to_json() const;
    /// Overrides fields present in `doc`; unknown keys are an error.
    static TunerConfig from_json(const nlohmann::json& doc, TunerConfig base);
};

struct LearnablePrompts {
    Matrix values;  // M x d
    bool unit_norm = true;
};

struct ShotSelection {
    std::vector<std::size_t> indices;  // grouped by class, ascending within a class
    std::vector<std::string> warnings;
};

/// min(k, n_j) indices per class j without replacement. Throws when a class
/// in [0, M) has no samples.
ShotSelection sample_shots(const LabelVector& labels, std::size_t k, std::uint64_t seed);

/// (sample, patch) pairs treated as ID-irrelevant.
using PatchSelection = std::vector<std::pair<std::size_t, std::size_t>>;

PatchSelection select_id_irrelevant_patches(const EmbeddingMatrix& images, const LabelVector& labels,
                                            const Matrix& prompts, const TunerConfig& cfg);

struct LossBreakdown {
    double total = 0.0;
    double cross_entropy = 0.0;
    double ood = 0.0;  // unweighted L_ood
    std::size_t selected_patches = 0;
};

/// `selection` overrides the patch selection; by default it is computed
/// from the current prompts.
LossBreakdown forward_loss(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& prompts,
                           const TunerConfig& cfg, const PatchSelection* selection = nullptr);

/// Analytic dL/dP (M x d), with the patch selection held constant.
Matrix loss_gradient(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& prompts,
                     const TunerConfig& cfg, const PatchSelection* selection = nullptr);

struct TraceRow {
    std::size_t epoch = 0;
    LossBreakdown loss;
};

struct TrainResult {
    LearnablePrompts prompts;
    /// Loss before each step (epochs 0..E-1) plus the final loss (epoch E).
    std::vector<TraceRow> trace;
};

TrainResult train(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& init, const TunerConfig& cfg);

/// Unit-row copy of the prompts; scoring is cosine-based, so this is what
/// gets evaluated when the unit-norm constraint was off during training.
Matrix scoring_prompts(const LearnablePrompts& prompts);

std::string trace_to_csv(const std::vector<TraceRow>& trace);

struct SweepPoint {
    std::size_t shots = 0;
    std::uint64_t seed = 0;
    EvalReport report;
};

/// Trains independently per shot count (sub-seed derived from cfg.seed and
/// k) on id_train, initialized from the level-0 class text, then evaluates
/// the tuned prompts with `scorer`.
std::vector<SweepPoint> shots_sweep(const LoadedBenchmark& bench, const TunerConfig& cfg,
                                    const std::vector<std::size_t>& shots, const ScorerSpec& scorer = {},
                                    const EvalOptions& options = {});

/// Tunes on cfg.shots samples per class of id_train. Returns the tuned
/// prompts and trace.
TrainResult tune_on_benchmark(const LoadedBenchmark& bench, const TunerConfig& cfg);

std::string sweep_to_csv(const std::vector<SweepPoint>& points);

}  // namespace oodscope
