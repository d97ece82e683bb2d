#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "oodscope/embedding_store.hpp"
#include "oodscope/matrix.hpp"
#include "oodscope/prompt_hierarchy.hpp"

namespace oodscope {

/// Knobs for the synthetic full-spectrum benchmark.
///
/// Samples are gaussian-then-normalize draws around class prototypes:
///   id         c_j + sum_l level_signal_l u_{j,l} + sigma_id g
///   covariate  c_j + covariate_shift w + (1 - attenuation) sum_l level_signal_l u_{j,l}
///                  + inflation sigma_id g          (w: one random direction per benchmark)
///   semantic   c'_k + sigma_id g,  c'_k at cosine `semantic_similarity` to a parent c_j
///   far        uniform on the unit sphere
/// Prototypes share a common "modality" direction with weight `modality_weight`.
/// Level 0 prompts sit near c_j; level l >= 1 prompts near
/// normalize(level_prompt_anchor c_j + u_{j,l}).
struct SynthConfig {
    std::size_t d = 64;
    std::size_t num_classes = 4;
    std::size_t levels = 5;
    std::size_t samples_per_split = 300;
    double sigma_id = 0.12;
    double covariate_shift = 0.5;
    double covariate_noise_inflation = 2.0;
    double covariate_attenuation = 0.9;
    std::vector<double> level_signal = {0.7, 0.7, 0.7, 0.7};  // one entry per level 1..L-1
    double modality_weight = 0.5;
    double semantic_similarity = 0.45;
    std::size_t semantic_classes = 4;
    std::size_t prompts_per_cell = 3;
    double prompt_noise = 0.05;
    double level_prompt_anchor = 0.5;
    std::size_t patches = 4;
    std::size_t foreground_patches = 2;
    double patch_noise = 0.1;
    std::size_t background_directions = 3;
    std::uint64_t seed = 42;

    void validate() const;
    nlohmann::json to_json() const;
    /// Overrides present keys; `level_signal` may be a number (broadcast) or
    /// an array of L - 1 numbers. Unknown keys are an error.
    static SynthConfig from_json(const nlohmann::json& doc, SynthConfig base);
};

struct SyntheticSplit {
    SplitRole role;
    EmbeddingMatrix embeddings;
    std::optional<LabelVector> labels;
};

struct SyntheticBenchmark {
    SynthConfig config;
    Matrix prototypes;           // M x d, unit rows
    Matrix semantic_prototypes;  // K x d, unit rows
    std::vector<SyntheticSplit> splits;
    PromptHierarchy hierarchy;
};

/// Builds every split and the prompt hierarchy in memory from one seeded stream.
SyntheticBenchmark build_synthetic(const SynthConfig& cfg);

/// Writes <role>.osem, <role>.labels.json, hierarchy.json and manifest.json
/// into `out_dir` (created if missing). Returns the manifest path.
std::filesystem::path write_benchmark(const SyntheticBenchmark& bench, const std::filesystem::path& out_dir);

std::filesystem::path generate_benchmark(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Rows i.i.d. uniform on the unit sphere (normalized standard gaussians).
EmbeddingMatrix uniform_sphere_sample(std::size_t count, std::size_t d, std::uint64_t seed);

}  // namespace oodscope
