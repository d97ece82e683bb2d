#include "oodscope/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "oodscope/error.hpp"

namespace oodscope {

using json = nlohmann::json;

SimilarityMatrix::SimilarityMatrix(Matrix values) : values_(std::move(values)) {
    if (values_.cols() < 2) throw ValidationError("similarity matrix needs M >= 2 categories");
    for (double v : values_.values()) {
        if (!std::isfinite(v) || v < -1.0 - kBoundSlack || v > 1.0 + kBoundSlack) {
            throw ValidationError("similarity value outside [-1, 1]: " + std::to_string(v));
        }
    }
}

Temperature::Temperature(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) throw ValidationError("temperature must be positive and finite");
}

// --- JSON -----------------------------------------------------------------------

json to_json(const ScoreVector& s) {
    return json{{"scorer", s.scorer}, {"params", s.params}, {"scores", s.scores}};
}

ScoreVector score_vector_from_json(const json& doc) {
    try {
        ScoreVector s;
        s.scorer = doc.at("scorer").get<std::string>();
        s.params = doc.value("params", json::object());
        s.scores = doc.at("scores").get<std::vector<double>>();
        for (double v : s.scores) {
            if (!std::isfinite(v)) throw ValidationError("score vector contains a non-finite value");
        }
        return s;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed score JSON: ") + e.what());
    }
}

ScoreVector load_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return score_vector_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ValidationError("'" + path.string() + "': invalid JSON: " + e.what());
    }
}

void save_scores(const ScoreVector& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << to_json(s).dump() << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// --- primitives ----------------------------------------------------------------

std::vector<double> softmax(std::span<const double> row, Temperature tau) {
    const double top = *std::max_element(row.begin(), row.end());
    std::vector<double> out(row.size());
    double sum = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        out[j] = std::exp((row[j] - top) / tau.value());
        sum += out[j];
    }
    for (double& v : out) v /= sum;
    return out;
}

double max_softmax_probability(std::span<const double> row, Temperature tau) {
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp((v - top) / tau.value());
    return 1.0 / sum;
}

double log_sum_exp(std::span<const double> row, Temperature tau) {
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp((v - top) / tau.value());
    return top / tau.value() + std::log(sum);
}

double energy_score(std::span<const double> row, Temperature temperature) {
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp((v - top) / temperature.value());
    return -(top + temperature.value() * std::log(sum));
}

LabelVector predict_argmax(const SimilarityMatrix& sims) {
    std::vector<int> out(sims.samples());
    for (std::size_t i = 0; i < sims.samples(); ++i) {
        auto r = sims.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return LabelVector(std::move(out), static_cast<int>(sims.categories()));
}

ScoreVector score_max_logit(const SimilarityMatrix& sims) {
    ScoreVector s{"max_logit", json::object(), std::vector<double>(sims.samples())};
    for (std::size_t i = 0; i < sims.samples(); ++i) {
        auto r = sims.row(i);
        s.scores[i] = -*std::max_element(r.begin(), r.end());
    }
    return s;
}

ScoreVector score_mcm(const SimilarityMatrix& sims, Temperature tau) {
    ScoreVector s{"mcm", json{{"tau", tau.value()}}, std::vector<double>(sims.samples())};
    for (std::size_t i = 0; i < sims.samples(); ++i) s.scores[i] = -max_softmax_probability(sims.row(i), tau);
    return s;
}

ScoreVector score_msp(const SimilarityMatrix& sims) {
    ScoreVector s = score_mcm(sims, Temperature(1.0));
    s.scorer = "msp";
    s.params = json::object();
    return s;
}

ScoreVector score_energy(const SimilarityMatrix& sims, Temperature temperature) {
    ScoreVector s{"energy", json{{"T", temperature.value()}}, std::vector<double>(sims.samples())};
    for (std::size_t i = 0; i < sims.samples(); ++i) s.scores[i] = energy_score(sims.row(i), temperature);
    return s;
}

ScoreVector score_gl_mcm(const SimilarityMatrix& global, const Tensor3& local, Temperature tau) {
    if (local.samples() != global.samples()) throw ValidationError("local similarities do not match sample count");
    if (local.patches() < 1) throw ValidationError("local features required");
    if (local.dim() != global.categories()) throw ValidationError("local similarities do not match category count");
    ScoreVector s{"gl_mcm", json{{"tau", tau.value()}}, std::vector<double>(global.samples())};
    for (std::size_t i = 0; i < global.samples(); ++i) {
        double best_local = 0.0;
        for (std::size_t k = 0; k < local.patches(); ++k) {
            best_local = std::max(best_local, max_softmax_probability(local.patch(i, k), tau));
        }
        s.scores[i] = -max_softmax_probability(global.row(i), tau) - best_local;
    }
    return s;
}

ScoreVector score_hier_mcm(const std::vector<SimilarityMatrix>& levels, Temperature tau, const LevelAggregation& agg) {
    std::vector<Matrix> raw;
    raw.reserve(levels.size());
    for (const auto& l : levels) raw.push_back(l.matrix());
    ScoreVector s = score_mcm(SimilarityMatrix(aggregate_levels(raw, agg)), tau);
    s.scorer = "hier_mcm";
    s.params["levels"] = levels.size();
    s.params["aggregation"] = aggregation_name(agg.mode);
    if (agg.mode == AggregationMode::Weighted) s.params["weights"] = agg.weights;
    return s;
}

Tensor3 patch_similarities(const EmbeddingMatrix& images, const Matrix& class_text) {
    if (!images.has_local()) throw ValidationError("local features required");
    if (images.d() != class_text.cols()) {
        throw ValidationError("dimension mismatch: images have d=" + std::to_string(images.d()) +
                              ", prompts have d=" + std::to_string(class_text.cols()));
    }
    const Tensor3& loc = *images.local();
    Tensor3 out(loc.samples(), loc.patches(), class_text.rows());
    for (std::size_t i = 0; i < loc.samples(); ++i)
        for (std::size_t k = 0; k < loc.patches(); ++k)
            for (std::size_t j = 0; j < class_text.rows(); ++j) out(i, k, j) = dot(loc.patch(i, k), class_text.row(j));
    return out;
}

std::vector<SimilarityMatrix> to_similarity(const std::vector<Matrix>& levels) {
    std::vector<SimilarityMatrix> out;
    out.reserve(levels.size());
    for (const auto& m : levels) out.emplace_back(m);
    return out;
}

// --- scorer configuration -------------------------------------------------------

const char* scorer_name(ScorerKind kind) {
    switch (kind) {
        case ScorerKind::MaxLogit: return "max_logit";
        case ScorerKind::Energy: return "energy";
        case ScorerKind::Mcm: return "mcm";
        case ScorerKind::Msp: return "msp";
        case ScorerKind::GlMcm: return "gl_mcm";
        case ScorerKind::HierMcm: return "hier_mcm";
    }
    return "?";
}

ScorerKind parse_scorer(const std::string& name) {
    for (auto k : {ScorerKind::MaxLogit, ScorerKind::Energy, ScorerKind::Mcm, ScorerKind::Msp, ScorerKind::GlMcm,
                   ScorerKind::HierMcm}) {
        if (name == scorer_name(k)) return k;
    }
    throw ValidationError("unknown scorer \"" + name + "\" (expected max_logit, energy, mcm, msp, gl_mcm or hier_mcm)");
}

std::size_t ScorerSpec::effective_levels(std::size_t hierarchy_levels) const {
    if (kind != ScorerKind::HierMcm) return 1;
    if (levels == 0) return hierarchy_levels;
    if (levels > hierarchy_levels) {
        throw ValidationError("scorer asks for " + std::to_string(levels) + " levels but the hierarchy has " +
                              std::to_string(hierarchy_levels));
    }
    return levels;
}

std::string ScorerSpec::label(std::size_t hierarchy_levels) const {
    switch (kind) {
        case ScorerKind::MaxLogit: return "Max-Logits";
        case ScorerKind::Energy: return "Energy";
        case ScorerKind::Mcm: return "MCM";
        case ScorerKind::Msp: return "MSP";
        case ScorerKind::GlMcm: return "GL-MCM";
        case ScorerKind::HierMcm: {
            std::string s = "MCM (L=" + std::to_string(effective_levels(hierarchy_levels));
            if (aggregation.mode != AggregationMode::Mean) s += ", " + std::string(aggregation_name(aggregation.mode));
            return s + ")";
        }
    }
    return "?";
}

json ScorerSpec::params(std::size_t hierarchy_levels) const {
    switch (kind) {
        case ScorerKind::MaxLogit:
        case ScorerKind::Msp: return json::object();
        case ScorerKind::Energy: return json{{"T", tau}};
        case ScorerKind::Mcm:
        case ScorerKind::GlMcm: return json{{"tau", tau}};
        case ScorerKind::HierMcm: {
            json p{{"tau", tau},
                   {"levels", effective_levels(hierarchy_levels)},
                   {"aggregation", aggregation_name(aggregation.mode)}};
            if (aggregation.mode == AggregationMode::Weighted) p["weights"] = aggregation.weights;
            return p;
        }
    }
    return json::object();
}

SimilarityMatrix scorer_similarities(const ScorerSpec& spec, const EmbeddingMatrix& images,
                                     const ClassTextEmbeddings& texts) {
    const std::size_t used = spec.effective_levels(texts.num_levels());
    auto sims = level_similarities(images, texts);
    sims.resize(used);
    return SimilarityMatrix(aggregate_levels(sims, spec.aggregation));
}

ScoreVector compute_scores(const ScorerSpec& spec, const EmbeddingMatrix& images, const ClassTextEmbeddings& texts) {
    const Temperature tau(spec.tau);
    ScoreVector out;
    switch (spec.kind) {
        case ScorerKind::MaxLogit: out = score_max_logit(scorer_similarities(spec, images, texts)); break;
        case ScorerKind::Energy: out = score_energy(scorer_similarities(spec, images, texts), tau); break;
        case ScorerKind::Mcm: out = score_mcm(scorer_similarities(spec, images, texts), tau); break;
        case ScorerKind::Msp: out = score_msp(scorer_similarities(spec, images, texts)); break;
        case ScorerKind::GlMcm:
            out = score_gl_mcm(scorer_similarities(spec, images, texts), patch_similarities(images, texts.level(0)), tau);
            break;
        case ScorerKind::HierMcm: {
            auto sims = level_similarities(images, texts);
            sims.resize(spec.effective_levels(texts.num_levels()));
            out = score_hier_mcm(to_similarity(sims), tau, spec.aggregation);
            break;
        }
    }
    out.params = spec.params(texts.num_levels());
    return out;
}

}  // namespace oodscope
