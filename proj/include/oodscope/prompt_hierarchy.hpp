#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "oodscope/matrix.hpp"

namespace oodscope {

class EmbeddingMatrix;

struct PromptRecord {
    std::string text;
    std::vector<double> embedding;
};

struct PromptClass {
    std::string name;
    /// levels[l] is the prompt group for level l.
    std::vector<std::vector<PromptRecord>> levels;
};

/// M categories x L levels of non-empty prompt groups sharing one dimension d.
class PromptHierarchy {
public:
    PromptHierarchy(std::size_t d, std::vector<PromptClass> classes);

    std::size_t d() const noexcept { return d_; }
    std::size_t num_classes() const noexcept { return classes_.size(); }
    std::size_t num_levels() const noexcept { return classes_.front().levels.size(); }
    const std::vector<PromptClass>& classes() const noexcept { return classes_; }
    const std::vector<PromptRecord>& cell(std::size_t category, std::size_t level) const {
        return classes_[category].levels[level];
    }

    /// Keeps only the first `levels` levels.
    PromptHierarchy truncated(std::size_t levels) const;

private:
    std::size_t d_;
    std::vector<PromptClass> classes_;
};

/// One unit-norm M x d matrix per level.
class ClassTextEmbeddings {
public:
    explicit ClassTextEmbeddings(std::vector<Matrix> levels);

    std::size_t num_levels() const noexcept { return levels_.size(); }
    std::size_t num_classes() const noexcept { return levels_.front().rows(); }
    std::size_t d() const noexcept { return levels_.front().cols(); }
    const Matrix& level(std::size_t l) const { return levels_.at(l); }
    const std::vector<Matrix>& levels() const noexcept { return levels_; }

private:
    std::vector<Matrix> levels_;
};

enum class AggregationMode { Mean, Max, Weighted };

/// How per-level similarity matrices combine into one.
struct LevelAggregation {
    AggregationMode mode = AggregationMode::Mean;
    std::vector<double> weights;  // required iff mode == Weighted; positive, sum to 1

    void validate(std::size_t levels) const;
};

const char* aggregation_name(AggregationMode mode);
AggregationMode parse_aggregation(const std::string& name);

/// Hierarchy JSON. Prompt embeddings may be inline arrays or
/// {"file": path, "row": int} references into an OSEM file, resolved
/// against the hierarchy file's directory.
PromptHierarchy load_hierarchy(const std::filesystem::path& path);
void save_hierarchy(const PromptHierarchy& h, const std::filesystem::path& path);

/// Mean-then-renormalize within each (category, level) cell.
ClassTextEmbeddings build_class_text_matrix(const PromptHierarchy& h);

/// Wraps an M x d prompt matrix as an L = 1 hierarchy, one prompt per class.
PromptHierarchy hierarchy_from_matrix(const Matrix& prompts, const std::vector<std::string>& names,
                                      const std::string& text = "tuned");

/// Cosine similarity per level: out[l](i, j) = v_i . t^l_j.
std::vector<Matrix> level_similarities(const EmbeddingMatrix& images, const ClassTextEmbeddings& texts);

Matrix aggregate_levels(const std::vector<Matrix>& sims, const LevelAggregation& agg);

}  // namespace oodscope
