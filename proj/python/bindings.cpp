#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "oodscope/detector_metrics.hpp"
#include "oodscope/embedding_store.hpp"
#include "oodscope/error.hpp"
#include "oodscope/fewshot_tuner.hpp"
#include "oodscope/scoring.hpp"
#include "oodscope/synthetic_bench.hpp"

namespace py = pybind11;
using namespace oodscope;
using json = nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
    if (a.ndim() != 2) throw ValidationError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
    const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
    return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Tensor3 to_tensor(const Array& a) {
    if (a.ndim() != 3) throw ValidationError("expected a 3-D array, got " + std::to_string(a.ndim()) + "-D");
    const auto n = static_cast<std::size_t>(a.shape(0)), p = static_cast<std::size_t>(a.shape(1)),
               d = static_cast<std::size_t>(a.shape(2));
    return Tensor3(n, p, d, std::vector<double>(a.data(), a.data() + n * p * d));
}

py::array_t<double> from_matrix(const Matrix& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    std::copy(m.values().begin(), m.values().end(), out.mutable_data());
    return out;
}

py::array_t<double> from_tensor(const Tensor3& t) {
    py::array_t<double> out({t.samples(), t.patches(), t.dim()});
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

py::array_t<double> from_vector(const std::vector<double>& v) {
    py::array_t<double> out(v.size());
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

std::vector<double> to_vector(const Array& a) {
    if (a.ndim() != 1) throw ValidationError("expected a 1-D array");
    return {a.data(), a.data() + a.shape(0)};
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::object& o) {
    if (o.is_none()) return json::object();
    return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::vector<ScorerSpec> parse_specs(const py::object& scorers) {
    std::vector<ScorerSpec> specs;
    for (const auto& item : scorers) {
        ScorerSpec s;
        if (py::isinstance<py::str>(item)) {
            s.kind = parse_scorer(item.cast<std::string>());
        } else {
            const json j = from_py(py::reinterpret_borrow<py::object>(item));
            s.kind = parse_scorer(j.at("scorer").get<std::string>());
            s.tau = j.value("tau", kDefaultTau);
            s.levels = j.value("levels", std::size_t{0});
            if (j.contains("aggregation")) s.aggregation.mode = parse_aggregation(j["aggregation"].get<std::string>());
            if (j.contains("weights")) s.aggregation.weights = j["weights"].get<std::vector<double>>();
        }
        specs.push_back(s);
    }
    return specs;
}

LevelAggregation make_aggregation(const std::string& mode, std::vector<double> weights) {
    LevelAggregation a;
    a.mode = parse_aggregation(mode);
    a.weights = std::move(weights);
    return a;
}

}  // namespace

PYBIND11_MODULE(_oodscope, m) {
    m.doc() = "Native core of oodscope";

    auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    auto io = py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    // FormatError derives from IoError; register it after so it is matched first.
    py::register_exception<FormatError>(m, "FormatError", io.ptr());
    (void)validation;

    m.def(
        "load_embeddings",
        [](const std::filesystem::path& path) {
            const auto e = load_embeddings(path);
            py::object local = py::none();
            if (e.has_local()) local = from_tensor(*e.local());
            return py::make_tuple(from_matrix(e.global()), local, e.unit_norm());
        },
        py::arg("path"), "Read an OSEM file. Returns (global, local or None, unit_norm).");
    m.def(
        "save_embeddings",
        [](const std::filesystem::path& path, const Array& global, std::optional<Array> local, bool unit_norm) {
            std::optional<Tensor3> t;
            if (local) t = to_tensor(*local);
            save_embeddings(EmbeddingMatrix(to_matrix(global), t, unit_norm), path);
        },
        py::arg("path"), py::arg("global_features"), py::arg("local_features") = py::none(), py::arg("unit_norm") = false);
    m.def(
        "l2_normalize", [](const Array& a) { return from_matrix(l2_normalize(EmbeddingMatrix(to_matrix(a), false)).global()); },
        py::arg("x"));

    m.def(
        "predict_argmax",
        [](const Array& s) { return predict_argmax(SimilarityMatrix(to_matrix(s))).values(); }, py::arg("sims"));
    m.def(
        "score_max_logit", [](const Array& s) { return from_vector(score_max_logit(SimilarityMatrix(to_matrix(s))).scores); },
        py::arg("sims"));
    m.def(
        "score_mcm",
        [](const Array& s, double tau) { return from_vector(score_mcm(SimilarityMatrix(to_matrix(s)), Temperature(tau)).scores); },
        py::arg("sims"), py::arg("tau") = kDefaultTau);
    m.def(
        "score_msp", [](const Array& s) { return from_vector(score_msp(SimilarityMatrix(to_matrix(s))).scores); },
        py::arg("sims"));
    m.def(
        "score_energy",
        [](const Array& s, double t) {
            return from_vector(score_energy(SimilarityMatrix(to_matrix(s)), Temperature(t)).scores);
        },
        py::arg("sims"), py::arg("temperature") = kDefaultTau);
    m.def(
        "score_gl_mcm",
        [](const Array& g, const Array& local, double tau) {
            return from_vector(score_gl_mcm(SimilarityMatrix(to_matrix(g)), to_tensor(local), Temperature(tau)).scores);
        },
        py::arg("global_sims"), py::arg("local_sims"), py::arg("tau") = kDefaultTau);
    m.def(
        "score_hier_mcm",
        [](const std::vector<Array>& levels, double tau, const std::string& aggregation, std::vector<double> weights) {
            std::vector<SimilarityMatrix> sims;
            for (const auto& l : levels) sims.emplace_back(to_matrix(l));
            return from_vector(score_hier_mcm(sims, Temperature(tau), make_aggregation(aggregation, std::move(weights))).scores);
        },
        py::arg("levels"), py::arg("tau") = kDefaultTau, py::arg("aggregation") = "mean",
        py::arg("weights") = std::vector<double>{});

    m.def(
        "auroc", [](const Array& id, const Array& ood) { return auroc(to_vector(id), to_vector(ood)); }, py::arg("id_scores"),
        py::arg("ood_scores"));
    m.def(
        "fpr_at_tpr",
        [](const Array& id, const Array& ood, double rate) { return fpr_at_tpr(to_vector(id), to_vector(ood), rate); },
        py::arg("id_scores"), py::arg("ood_scores"), py::arg("rate") = 0.95);
    m.def(
        "calibrate_threshold", [](const Array& id, double rate) { return calibrate_threshold(to_vector(id), rate); },
        py::arg("id_scores"), py::arg("target_id_rate") = 0.95);
    m.def(
        "decide",
        [](const Array& s, double threshold) {
            const auto flags = decide(to_vector(s), threshold);
            py::array_t<bool> out(flags.size());
            for (std::size_t i = 0; i < flags.size(); ++i) out.mutable_data()[i] = flags[i] != 0;
            return out;
        },
        py::arg("scores"), py::arg("threshold"));

    m.def(
        "generate_benchmark",
        [](const std::filesystem::path& out_dir, const py::object& config) {
            const auto cfg = SynthConfig::from_json(from_py(config), SynthConfig{});
            cfg.validate();
            return generate_benchmark(cfg, out_dir);
        },
        py::arg("out_dir"), py::arg("config") = py::none());
    m.def(
        "evaluate",
        [](const std::filesystem::path& manifest, const py::object& scorers, std::size_t bins) {
            EvalOptions o;
            o.histogram_bins = bins;
            return to_py(reports_to_json(run_full_spectrum_eval(manifest, parse_specs(scorers), o)));
        },
        py::arg("manifest"), py::arg("scorers") = std::vector<std::string>{"mcm"}, py::arg("bins") = 50);
    m.def(
        "tune",
        [](const std::filesystem::path& manifest, const py::object& config) {
            const auto cfg = TunerConfig::from_json(from_py(config), TunerConfig{});
            const auto result = tune_on_benchmark(load_benchmark(manifest), cfg);
            py::list trace;
            for (const auto& row : result.trace)
                trace.append(py::dict(py::arg("epoch") = row.epoch, py::arg("cross_entropy") = row.loss.cross_entropy,
                                      py::arg("ood") = row.loss.ood, py::arg("total") = row.loss.total));
            return py::make_tuple(from_matrix(scoring_prompts(result.prompts)), trace);
        },
        py::arg("manifest"), py::arg("config") = py::none(),
        "Tune class-text vectors on a benchmark. Returns (unit-row prompts, trace).");
    m.def(
        "shots_sweep",
        [](const std::filesystem::path& manifest, const std::vector<std::size_t>& shots, const py::object& config) {
            const auto cfg = TunerConfig::from_json(from_py(config), TunerConfig{});
            py::list out;
            for (const auto& p : shots_sweep(load_benchmark(manifest), cfg, shots))
                out.append(py::dict(py::arg("shots") = p.shots, py::arg("seed") = p.seed,
                                    py::arg("report") = to_py(p.report.to_json())));
            return out;
        },
        py::arg("manifest"), py::arg("shots"), py::arg("config") = py::none());
}
