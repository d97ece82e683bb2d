#include "oodscope/fewshot_tuner.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "oodscope/error.hpp"
#include "oodscope/random.hpp"

namespace oodscope {

using json = nlohmann::json;

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "sgd") return OptimizerKind::Sgd;
    throw ValidationError("unknown optimizer \"" + name + "\" (expected sgd or adam)");
}

void TunerConfig::validate() const {
    if (shots < 1) throw ValidationError("shots must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning rate must be > 0");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be > 0");
    if (!(locoop_weight >= 0.0) || !std::isfinite(locoop_weight)) throw ValidationError("locoop weight must be >= 0");
    if (topk < 1) throw ValidationError("topk must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ValidationError("Adam epsilon must be > 0");
}

json TunerConfig::to_json() const {
    return json{{"shots", shots},         {"epochs", epochs},   {"lr", learning_rate},
                {"tau", tau},             {"locoop_weight", locoop_weight},
                {"topk", topk},           {"seed", seed},       {"optimizer", optimizer_name(optimizer)},
                {"beta1", beta1},         {"beta2", beta2},     {"epsilon", epsilon},
                {"unit_norm", unit_norm}};
}

TunerConfig TunerConfig::from_json(const json& doc, TunerConfig base) {
    if (!doc.is_object()) throw ValidationError("tuner config must be a JSON object");
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "shots") base.shots = value.get<std::size_t>();
            else if (key == "epochs") base.epochs = value.get<std::size_t>();
            else if (key == "lr") base.learning_rate = value.get<double>();
            else if (key == "tau") base.tau = value.get<double>();
            else if (key == "locoop_weight") base.locoop_weight = value.get<double>();
            else if (key == "topk") base.topk = value.get<std::size_t>();
            else if (key == "seed") base.seed = value.get<std::uint64_t>();
            else if (key == "optimizer") base.optimizer = parse_optimizer(value.get<std::string>());
            else if (key == "beta1") base.beta1 = value.get<double>();
            else if (key == "beta2") base.beta2 = value.get<double>();
            else if (key == "epsilon") base.epsilon = value.get<double>();
            else if (key == "unit_norm") base.unit_norm = value.get<bool>();
            else throw ValidationError("unknown tuner config key \"" + key + "\"");
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed tuner config: ") + e.what());
    }
    return base;
}

ShotSelection sample_shots(const LabelVector& labels, std::size_t k, std::uint64_t seed) {
    if (k < 1) throw ValidationError("shots must be >= 1");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(labels.num_classes()));
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);

    Rng rng(seed);
    ShotSelection out;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& pool = by_class[c];
        if (pool.empty()) throw ValidationError("empty category " + std::to_string(c) + " in training labels");
        if (pool.size() <= k) {
            if (pool.size() < k) {
                out.warnings.push_back("class " + std::to_string(c) + " has only " + std::to_string(pool.size()) +
                                       " samples for " + std::to_string(k) + "-shot; using all");
            }
            out.indices.insert(out.indices.end(), pool.begin(), pool.end());
            continue;
        }
        // partial Fisher-Yates
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
        out.indices.insert(out.indices.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

namespace {

void check_inputs(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& prompts,
                  const TunerConfig& cfg) {
    if (labels.size() != images.n()) throw ValidationError("label count does not match the number of images");
    if (prompts.cols() != images.d()) {
        throw ValidationError("dimension mismatch: prompts have d=" + std::to_string(prompts.cols()) +
                              ", images have d=" + std::to_string(images.d()));
    }
    if (prompts.rows() < 2) throw ValidationError("prompt matrix needs M >= 2 rows");
    if (static_cast<std::size_t>(labels.num_classes()) > prompts.rows()) {
        throw ValidationError("labels reference more classes than there are prompts");
    }
    if (cfg.locoop_weight > 0.0 && !images.has_local()) {
        throw ValidationError("locoop_weight > 0 requires local (patch) embeddings");
    }
}

// a_j = (row . prompt_j) / tau, then log-softmax in place; returns the logits' lse.
void log_softmax_logits(std::span<const double> x, const Matrix& prompts, double tau, std::vector<double>& logq) {
    const std::size_t m = prompts.rows();
    logq.resize(m);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
        logq[j] = dot(x, prompts.row(j)) / tau;
        top = std::max(top, logq[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) sum += std::exp(logq[j] - top);
    const double lse = top + std::log(sum);
    for (double& v : logq) v -= lse;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

}  // namespace

PatchSelection select_id_irrelevant_patches(const EmbeddingMatrix& images, const LabelVector& labels,
                                            const Matrix& prompts, const TunerConfig& cfg) {
    PatchSelection out;
    if (!images.has_local()) return out;
    const Tensor3& local = *images.local();
    std::vector<double> sims(prompts.rows());
    for (std::size_t i = 0; i < images.n(); ++i) {
        for (std::size_t k = 0; k < images.p(); ++k) {
            for (std::size_t j = 0; j < prompts.rows(); ++j) sims[j] = dot(local.patch(i, k), prompts.row(j));
            const auto top = top_k_indices(sims, cfg.topk);
            if (std::find(top.begin(), top.end(), static_cast<std::size_t>(labels[i])) == top.end()) {
                out.emplace_back(i, k);
            }
        }
    }
    return out;
}

LossBreakdown forward_loss(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& prompts,
                           const TunerConfig& cfg, const PatchSelection* selection) {
    check_inputs(images, labels, prompts, cfg);
    LossBreakdown out;
    std::vector<double> logq;
    double ce = 0.0;
    for (std::size_t i = 0; i < images.n(); ++i) {
        log_softmax_logits(images.global().row(i), prompts, cfg.tau, logq);
        ce -= logq[static_cast<std::size_t>(labels[i])];
    }
    out.cross_entropy = ce / static_cast<double>(images.n());

    if (cfg.locoop_weight > 0.0) {
        PatchSelection computed;
        if (!selection) {
            computed = select_id_irrelevant_patches(images, labels, prompts, cfg);
            selection = &computed;
        }
        const double log_m = std::log(static_cast<double>(prompts.rows()));
        double ood = 0.0;
        for (const auto& [i, k] : *selection) {
            log_softmax_logits(images.local()->patch(i, k), prompts, cfg.tau, logq);
            double neg_entropy = 0.0;
            for (double lq : logq) neg_entropy += std::exp(lq) * lq;
            ood += log_m + neg_entropy;
        }
        out.selected_patches = selection->size();
        out.ood = selection->empty() ? 0.0 : ood / static_cast<double>(selection->size());
    }
    out.total = out.cross_entropy + cfg.locoop_weight * out.ood;
    return out;
}

Matrix loss_gradient(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& prompts,
                     const TunerConfig& cfg, const PatchSelection* selection) {
    check_inputs(images, labels, prompts, cfg);
    const std::size_t m = prompts.rows();
    const std::size_t d = prompts.cols();
    Matrix g(m, d);
    std::vector<double> logq;

    // dCE/dP_j = (1/n) sum_i (q_ij - [y_i = j]) v_i / tau
    const double ce_scale = 1.0 / (static_cast<double>(images.n()) * cfg.tau);
    for (std::size_t i = 0; i < images.n(); ++i) {
        const auto v = images.global().row(i);
        log_softmax_logits(v, prompts, cfg.tau, logq);
        for (std::size_t j = 0; j < m; ++j) {
            const double coeff = (std::exp(logq[j]) - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0)) * ce_scale;
            auto gj = g.row(j);
            for (std::size_t t = 0; t < d; ++t) gj[t] += coeff * v[t];
        }
    }

    if (cfg.locoop_weight > 0.0) {
        PatchSelection computed;
        if (!selection) {
            computed = select_id_irrelevant_patches(images, labels, prompts, cfg);
            selection = &computed;
        }
        if (!selection->empty()) {
            // d(log M - H)/da_j = q_j (log q_j + H), a = P u / tau
            const double scale = cfg.locoop_weight / (static_cast<double>(selection->size()) * cfg.tau);
            for (const auto& [i, k] : *selection) {
                const auto u = images.local()->patch(i, k);
                log_softmax_logits(u, prompts, cfg.tau, logq);
                double entropy = 0.0;
                for (double lq : logq) entropy -= std::exp(lq) * lq;
                for (std::size_t j = 0; j < m; ++j) {
                    const double coeff = std::exp(logq[j]) * (logq[j] + entropy) * scale;
                    auto gj = g.row(j);
                    for (std::size_t t = 0; t < d; ++t) gj[t] += coeff * u[t];
                }
            }
        }
    }
    return g;
}

namespace {

void renormalize_rows(Matrix& p) {
    for (std::size_t j = 0; j < p.rows(); ++j) {
        auto r = p.row(j);
        const double norm = norm2(r);
        if (!(norm > 1e-12)) throw ValidationError("prompt row " + std::to_string(j) + " collapsed to zero norm");
        for (double& v : r) v /= norm;
    }
}

bool finite(const LossBreakdown& l) { return std::isfinite(l.total); }

}  // namespace

TrainResult train(const EmbeddingMatrix& images, const LabelVector& labels, const Matrix& init, const TunerConfig& cfg) {
    cfg.validate();
    // Patches play no role without the regularizer; drop them so the result
    // cannot depend on them.
    const EmbeddingMatrix data = cfg.locoop_weight > 0.0 ? images : images.without_local();
    check_inputs(data, labels, init, cfg);

    Matrix p = init;
    // epochs = 0 hands back the init untouched, not even re-projected.
    if (cfg.unit_norm && cfg.epochs > 0) renormalize_rows(p);
    Matrix m1(p.rows(), p.cols());
    Matrix m2(p.rows(), p.cols());
    TrainResult result;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        PatchSelection selection;
        if (cfg.locoop_weight > 0.0) selection = select_id_irrelevant_patches(data, labels, p, cfg);
        const LossBreakdown loss = forward_loss(data, labels, p, cfg, &selection);
        if (!finite(loss)) throw ValidationError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
        result.trace.push_back({epoch, loss});

        const Matrix g = loss_gradient(data, labels, p, cfg, &selection);
        auto pv = p.values();
        auto gv = g.values();
        if (cfg.optimizer == OptimizerKind::Sgd) {
            for (std::size_t e = 0; e < pv.size(); ++e) pv[e] -= cfg.learning_rate * gv[e];
        } else {
            auto mv = m1.values();
            auto vv = m2.values();
            const double t = static_cast<double>(epoch + 1);
            const double bc1 = 1.0 - std::pow(cfg.beta1, t);
            const double bc2 = 1.0 - std::pow(cfg.beta2, t);
            for (std::size_t e = 0; e < pv.size(); ++e) {
                mv[e] = cfg.beta1 * mv[e] + (1.0 - cfg.beta1) * gv[e];
                vv[e] = cfg.beta2 * vv[e] + (1.0 - cfg.beta2) * gv[e] * gv[e];
                pv[e] -= cfg.learning_rate * (mv[e] / bc1) / (std::sqrt(vv[e] / bc2) + cfg.epsilon);
            }
        }
        for (double v : pv) {
            if (!std::isfinite(v)) throw ValidationError("training diverged (non-finite prompts) at epoch " + std::to_string(epoch));
        }
        if (cfg.unit_norm) renormalize_rows(p);
    }
    if (cfg.epochs > 0) {
        const LossBreakdown final_loss = forward_loss(data, labels, p, cfg);
        if (!finite(final_loss)) throw ValidationError("training diverged (non-finite loss) at epoch " + std::to_string(cfg.epochs));
        result.trace.push_back({cfg.epochs, final_loss});
    }
    result.prompts = LearnablePrompts{std::move(p), cfg.unit_norm};
    return result;
}

Matrix scoring_prompts(const LearnablePrompts& prompts) {
    Matrix p = prompts.values;
    renormalize_rows(p);
    return p;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "epoch,loss,cross_entropy,ood,selected_patches\n";
    for (const auto& r : trace) {
        os << r.epoch << ',' << r.loss.total << ',' << r.loss.cross_entropy << ',' << r.loss.ood << ','
           << r.loss.selected_patches << '\n';
    }
    return os.str();
}

namespace {

TrainResult tune_with_seed(const LoadedBenchmark& bench, const TunerConfig& cfg, std::size_t shots, std::uint64_t seed) {
    const EmbeddingMatrix* train_split = bench.find(SplitRole::IdTrain);
    if (!train_split || !bench.id_train_labels) throw ValidationError("few-shot tuning needs a labeled id_train split");
    const ShotSelection sel = sample_shots(*bench.id_train_labels, shots, seed);
    const EmbeddingMatrix images = train_split->select_rows(sel.indices);
    const LabelVector labels = bench.id_train_labels->select(sel.indices);
    const ClassTextEmbeddings zero_shot = build_class_text_matrix(bench.hierarchy);
    TunerConfig run_cfg = cfg;
    run_cfg.shots = shots;
    run_cfg.seed = seed;
    return train(images, labels, zero_shot.level(0), run_cfg);
}

}  // namespace

TrainResult tune_on_benchmark(const LoadedBenchmark& bench, const TunerConfig& cfg) {
    cfg.validate();
    return tune_with_seed(bench, cfg, cfg.shots, cfg.seed);
}

std::vector<SweepPoint> shots_sweep(const LoadedBenchmark& bench, const TunerConfig& cfg,
                                    const std::vector<std::size_t>& shots, const ScorerSpec& scorer,
                                    const EvalOptions& options) {
    cfg.validate();
    std::vector<SweepPoint> out;
    for (std::size_t k : shots) {
        const std::uint64_t seed = derive_seed(cfg.seed, k);
        const TrainResult trained = tune_with_seed(bench, cfg, k, seed);
        const ClassTextEmbeddings texts({scoring_prompts(trained.prompts)});
        EvalReport report = evaluate(bench, scorer, texts, options);
        report.prompts = "tuned " + std::to_string(k) + "-shot";
        out.push_back({k, seed, std::move(report)});
    }
    return out;
}

std::string sweep_to_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "shots,seed,split,auroc,fpr95,id_top1\n";
    for (const auto& p : points) {
        for (const auto& s : p.report.ood) {
            os << p.shots << ',' << p.seed << ',' << split_name(s.role) << ',' << s.auroc << ',' << s.fpr95 << ',';
            if (p.report.id_top1) os << *p.report.id_top1;
            os << '\n';
        }
    }
    return os.str();
}

}  // namespace oodscope
