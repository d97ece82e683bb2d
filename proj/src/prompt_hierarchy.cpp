#include "oodscope/prompt_hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "oodscope/embedding_store.hpp"
#include "oodscope/error.hpp"

namespace oodscope {

namespace fs = std::filesystem;
using json = nlohmann::json;

PromptHierarchy::PromptHierarchy(std::size_t d, std::vector<PromptClass> classes)
    : d_(d), classes_(std::move(classes)) {
    if (d_ < 2) throw ValidationError("hierarchy needs d >= 2");
    if (classes_.size() < 2) throw ValidationError("hierarchy needs M >= 2 categories");
    const std::size_t levels = classes_.front().levels.size();
    if (levels < 1) throw ValidationError("hierarchy needs L >= 1 levels");
    for (std::size_t j = 0; j < classes_.size(); ++j) {
        const auto& c = classes_[j];
        if (c.levels.size() != levels) {
            throw ValidationError("class " + std::to_string(j) + " has " + std::to_string(c.levels.size()) +
                                  " levels, expected " + std::to_string(levels));
        }
        for (std::size_t l = 0; l < levels; ++l) {
            if (c.levels[l].empty()) {
                throw ValidationError("empty prompt group at (" + std::to_string(j) + ", " + std::to_string(l) + ")");
            }
            for (const auto& rec : c.levels[l]) {
                if (rec.embedding.size() != d_) {
                    throw ValidationError("dimension mismatch: prompt at (" + std::to_string(j) + ", " +
                                          std::to_string(l) + ") has d=" + std::to_string(rec.embedding.size()) +
                                          ", expected d=" + std::to_string(d_));
                }
                for (double v : rec.embedding) {
                    if (!std::isfinite(v)) throw ValidationError("non-finite prompt embedding value");
                }
            }
        }
    }
}

PromptHierarchy PromptHierarchy::truncated(std::size_t levels) const {
    if (levels < 1 || levels > num_levels()) {
        throw ValidationError("cannot keep " + std::to_string(levels) + " of " + std::to_string(num_levels()) + " levels");
    }
    auto classes = classes_;
    for (auto& c : classes) c.levels.resize(levels);
    return PromptHierarchy(d_, std::move(classes));
}

ClassTextEmbeddings::ClassTextEmbeddings(std::vector<Matrix> levels) : levels_(std::move(levels)) {
    if (levels_.empty()) throw ValidationError("class text embeddings need at least one level");
    for (const auto& m : levels_) {
        if (m.rows() != levels_.front().rows() || m.cols() != levels_.front().cols()) {
            throw ValidationError("class text levels have inconsistent shapes");
        }
        for (std::size_t j = 0; j < m.rows(); ++j) {
            if (std::abs(norm2(m.row(j)) - 1.0) > EmbeddingMatrix::kUnitNormTolerance) {
                throw ValidationError("class text row " + std::to_string(j) + " is not unit-norm");
            }
        }
    }
}

void LevelAggregation::validate(std::size_t levels) const {
    if (mode != AggregationMode::Weighted) return;
    if (weights.size() != levels) {
        throw ValidationError("weighted aggregation needs " + std::to_string(levels) + " weights, got " +
                              std::to_string(weights.size()));
    }
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("aggregation weights must be positive");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("aggregation weights must sum to 1");
}

const char* aggregation_name(AggregationMode mode) {
    switch (mode) {
        case AggregationMode::Mean: return "mean";
        case AggregationMode::Max: return "max";
        case AggregationMode::Weighted: return "weighted";
    }
    return "?";
}

AggregationMode parse_aggregation(const std::string& name) {
    if (name == "mean") return AggregationMode::Mean;
    if (name == "max") return AggregationMode::Max;
    if (name == "weighted") return AggregationMode::Weighted;
    throw ValidationError("unknown aggregation mode \"" + name + "\" (expected mean, max or weighted)");
}

// --- JSON -------------------------------------------------------------------

PromptHierarchy load_hierarchy(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("'" + path.string() + "': invalid JSON: " + e.what());
    }
    const std::string where = "'" + path.string() + "': ";
    std::map<fs::path, EmbeddingMatrix> referenced;
    try {
        const auto d = doc.at("d").get<std::size_t>();
        const auto m = doc.at("M").get<std::size_t>();
        const auto l = doc.at("L").get<std::size_t>();
        std::vector<PromptClass> classes;
        for (const auto& jc : doc.at("classes")) {
            PromptClass c;
            c.name = jc.value("name", "");
            for (const auto& jl : jc.at("levels")) {
                std::vector<PromptRecord> group;
                for (const auto& jp : jl) {
                    PromptRecord rec;
                    rec.text = jp.value("text", "");
                    const auto& e = jp.at("embedding");
                    if (e.is_object()) {
                        fs::path file = e.at("file").get<std::string>();
                        if (file.is_relative()) file = path.parent_path() / file;
                        auto it = referenced.find(file);
                        if (it == referenced.end()) it = referenced.emplace(file, load_embeddings(file)).first;
                        const auto row = e.at("row").get<std::size_t>();
                        if (row >= it->second.n()) {
                            throw ValidationError(where + "row " + std::to_string(row) + " out of range for '" +
                                                  file.string() + "'");
                        }
                        auto r = it->second.global().row(row);
                        rec.embedding.assign(r.begin(), r.end());
                    } else {
                        rec.embedding = e.get<std::vector<double>>();
                    }
                    group.push_back(std::move(rec));
                }
                c.levels.push_back(std::move(group));
            }
            classes.push_back(std::move(c));
        }
        if (classes.size() != m) throw ValidationError(where + "M does not match the number of classes");
        for (const auto& c : classes) {
            if (c.levels.size() != l) throw ValidationError(where + "L does not match the level count of class \"" + c.name + "\"");
        }
        return PromptHierarchy(d, std::move(classes));
    } catch (const json::exception& e) {
        throw ValidationError(where + "malformed hierarchy: " + e.what());
    }
}

void save_hierarchy(const PromptHierarchy& h, const fs::path& path) {
    json doc;
    doc["d"] = h.d();
    doc["M"] = h.num_classes();
    doc["L"] = h.num_levels();
    json classes = json::array();
    for (const auto& c : h.classes()) {
        json levels = json::array();
        for (const auto& group : c.levels) {
            json g = json::array();
            for (const auto& rec : group) g.push_back({{"text", rec.text}, {"embedding", rec.embedding}});
            levels.push_back(std::move(g));
        }
        classes.push_back({{"name", c.name}, {"levels", std::move(levels)}});
    }
    doc["classes"] = std::move(classes);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << doc.dump() << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// --- operations -------------------------------------------------------------

ClassTextEmbeddings build_class_text_matrix(const PromptHierarchy& h) {
    std::vector<Matrix> levels;
    for (std::size_t l = 0; l < h.num_levels(); ++l) {
        Matrix out(h.num_classes(), h.d());
        for (std::size_t j = 0; j < h.num_classes(); ++j) {
            const auto& group = h.cell(j, l);
            auto row = out.row(j);
            for (const auto& rec : group) {
                if (std::abs(norm2(rec.embedding) - 1.0) > EmbeddingMatrix::kUnitNormTolerance) {
                    throw ValidationError("prompt embedding at (" + std::to_string(j) + ", " + std::to_string(l) +
                                          ") is not unit-norm");
                }
                for (std::size_t k = 0; k < h.d(); ++k) row[k] += rec.embedding[k];
            }
            for (double& v : row) v /= static_cast<double>(group.size());
            const double norm = norm2(row);
            if (norm < 1e-12) {
                throw ValidationError("zero-norm prompt mean at (" + std::to_string(j) + ", " + std::to_string(l) + ")");
            }
            for (double& v : row) v /= norm;
        }
        levels.push_back(std::move(out));
    }
    return ClassTextEmbeddings(std::move(levels));
}

PromptHierarchy hierarchy_from_matrix(const Matrix& prompts, const std::vector<std::string>& names,
                                      const std::string& text) {
    std::vector<PromptClass> classes;
    for (std::size_t j = 0; j < prompts.rows(); ++j) {
        PromptClass c;
        c.name = j < names.size() ? names[j] : "class_" + std::to_string(j);
        auto r = prompts.row(j);
        c.levels.push_back({PromptRecord{text, std::vector<double>(r.begin(), r.end())}});
        classes.push_back(std::move(c));
    }
    return PromptHierarchy(prompts.cols(), std::move(classes));
}

std::vector<Matrix> level_similarities(const EmbeddingMatrix& images, const ClassTextEmbeddings& texts) {
    if (images.d() != texts.d()) {
        throw ValidationError("dimension mismatch: images have d=" + std::to_string(images.d()) +
                              ", prompts have d=" + std::to_string(texts.d()));
    }
    if (!images.unit_norm()) throw ValidationError("image embeddings must be unit-normalized");
    std::vector<Matrix> out;
    out.reserve(texts.num_levels());
    for (const auto& t : texts.levels()) out.push_back(matmul_transposed(images.global(), t));
    return out;
}

Matrix aggregate_levels(const std::vector<Matrix>& sims, const LevelAggregation& agg) {
    if (sims.empty()) throw ValidationError("aggregate_levels needs at least one level");
    for (const auto& s : sims) {
        if (s.rows() != sims.front().rows() || s.cols() != sims.front().cols()) {
            throw ValidationError("shape mismatch between level similarity matrices");
        }
    }
    agg.validate(sims.size());
    if (sims.size() == 1) return sims.front();

    Matrix out(sims.front().rows(), sims.front().cols());
    auto dst = out.values();
    const auto num_levels = static_cast<double>(sims.size());
    for (std::size_t e = 0; e < dst.size(); ++e) {
        double acc = agg.mode == AggregationMode::Max ? sims.front().values()[e] : 0.0;
        for (std::size_t l = 0; l < sims.size(); ++l) {
            const double v = sims[l].values()[e];
            switch (agg.mode) {
                case AggregationMode::Mean: acc += v; break;
                case AggregationMode::Max: acc = std::max(acc, v); break;
                case AggregationMode::Weighted: acc += agg.weights[l] * v; break;
            }
        }
        if (agg.mode == AggregationMode::Mean) acc /= num_levels;
        dst[e] = acc;
    }
    return out;
}

}  // namespace oodscope
