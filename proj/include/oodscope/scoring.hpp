#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodscope/embedding_store.hpp"
#include "oodscope/matrix.hpp"
#include "oodscope/prompt_hierarchy.hpp"

namespace oodscope {

/// n x M cosine similarities, every entry within [-1 - 1e-9, 1 + 1e-9], M >= 2.
class SimilarityMatrix {
public:
    static constexpr double kBoundSlack = 1e-9;

    explicit SimilarityMatrix(Matrix values);

    std::size_t samples() const noexcept { return values_.rows(); }
    std::size_t categories() const noexcept { return values_.cols(); }
    std::span<const double> row(std::size_t i) const { return values_.row(i); }
    double operator()(std::size_t i, std::size_t j) const { return values_(i, j); }
    const Matrix& matrix() const noexcept { return values_; }

private:
    Matrix values_;
};

/// Softmax temperature; strictly positive.
class Temperature {
public:
    explicit Temperature(double value);
    double value() const noexcept { return value_; }

private:
    double value_;
};

inline constexpr double kDefaultTau = 0.01;

/// Per-sample OOD scores. Higher means more likely out-of-distribution.
struct ScoreVector {
    std::string scorer;
    nlohmann::json params = nlohmann::json::object();
    std::vector<double> scores;

    std::size_t size() const noexcept { return scores.size(); }
};

nlohmann::json to_json(const ScoreVector& s);
ScoreVector score_vector_from_json(const nlohmann::json& doc);
ScoreVector load_scores(const std::filesystem::path& path);
void save_scores(const ScoreVector& s, const std::filesystem::path& path);

/// Softmax of row / tau with max subtraction.
std::vector<double> softmax(std::span<const double> row, Temperature tau);
/// max_j softmax(row / tau)_j, computed as 1 / sum_k exp((s_k - s_max) / tau).
double max_softmax_probability(std::span<const double> row, Temperature tau);
/// log sum_j exp(row_j / tau) with max subtraction.
double log_sum_exp(std::span<const double> row, Temperature tau);

/// -(max + T log sum_j exp((s_j - max) / T)); defined for any finite row.
double energy_score(std::span<const double> row, Temperature temperature);

/// Row-wise argmax; ties go to the lowest index.
LabelVector predict_argmax(const SimilarityMatrix& sims);

ScoreVector score_max_logit(const SimilarityMatrix& sims);
ScoreVector score_mcm(const SimilarityMatrix& sims, Temperature tau);
ScoreVector score_msp(const SimilarityMatrix& sims);
/// -T * log sum_j exp(s_ij / T)
ScoreVector score_energy(const SimilarityMatrix& sims, Temperature temperature);
/// MCM on the global row plus MCM on the most confident (patch, category)
/// pair; `local` is n x p x M.
ScoreVector score_gl_mcm(const SimilarityMatrix& global, const Tensor3& local, Temperature tau);
/// MCM on the level-aggregated similarity matrix.
ScoreVector score_hier_mcm(const std::vector<SimilarityMatrix>& levels, Temperature tau, const LevelAggregation& agg);

/// Patch-level cosine similarities against one class-text level: n x p x M.
Tensor3 patch_similarities(const EmbeddingMatrix& images, const Matrix& class_text);

std::vector<SimilarityMatrix> to_similarity(const std::vector<Matrix>& levels);

// --- scorer configuration ------------------------------------------------------

enum class ScorerKind { MaxLogit, Energy, Mcm, Msp, GlMcm, HierMcm };

const char* scorer_name(ScorerKind kind);
ScorerKind parse_scorer(const std::string& name);

/// A scorer and its parameters. `levels` applies to hier_mcm only
/// (0 = every level of the hierarchy); the others score level 0.
struct ScorerSpec {
    ScorerKind kind = ScorerKind::Mcm;
    double tau = kDefaultTau;
    std::size_t levels = 0;
    LevelAggregation aggregation;

    /// Human-readable row label, e.g. "MCM (L=5)".
    std::string label(std::size_t hierarchy_levels) const;
    nlohmann::json params(std::size_t hierarchy_levels) const;
    std::size_t effective_levels(std::size_t hierarchy_levels) const;
};

/// Similarity matrix the scorer's decision is based on (aggregated for
/// hier_mcm, level 0 otherwise).
SimilarityMatrix scorer_similarities(const ScorerSpec& spec, const EmbeddingMatrix& images,
                                     const ClassTextEmbeddings& texts);

ScoreVector compute_scores(const ScorerSpec& spec, const EmbeddingMatrix& images, const ClassTextEmbeddings& texts);

}  // namespace oodscope
