#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oodscope/error.hpp"
#include "oodscope/fewshot_tuner.hpp"
#include "oodscope/synthetic_bench.hpp"
#include "support.hpp"

using namespace oodscope;

namespace {

struct Instance {
    EmbeddingMatrix images;
    LabelVector labels;
    Matrix prompts;
};

Instance random_instance(std::uint64_t seed, std::size_t n = 8, std::size_t m = 3, std::size_t d = 16, std::size_t p = 4) {
    Rng rng(seed);
    auto g = testutil::random_unit_matrix(rng, n, d);
    auto local = testutil::random_unit_patches(rng, n, p, d);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % m);
    return {EmbeddingMatrix(g, local, true), LabelVector(y, static_cast<int>(m)), testutil::random_unit_matrix(rng, m, d)};
}

double central_difference(const Instance& in, const TunerConfig& cfg, const PatchSelection& sel, std::size_t j,
                          std::size_t t, double h) {
    Matrix plus = in.prompts, minus = in.prompts;
    plus(j, t) += h;
    minus(j, t) -= h;
    return (forward_loss(in.images, in.labels, plus, cfg, &sel).total -
            forward_loss(in.images, in.labels, minus, cfg, &sel).total) /
           (2 * h);
}

}  // namespace

TEST_CASE("TunerConfig") {
    TunerConfig c;
    CHECK(c.shots == 50);
    CHECK(c.epochs == 100);
    CHECK(c.learning_rate == 1e-2);
    CHECK(c.topk == 3);
    CHECK(c.optimizer == OptimizerKind::Adam);
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.shots = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.learning_rate = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.topk = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    const auto round = TunerConfig::from_json(c.to_json(), TunerConfig{});
    CHECK(round.to_json() == c.to_json());
    const auto over = TunerConfig::from_json({{"optimizer", "sgd"}, {"lr", 0.5}}, c);
    CHECK(over.optimizer == OptimizerKind::Sgd);
    CHECK(over.learning_rate == 0.5);
    CHECK_THROWS_AS(TunerConfig::from_json({{"lr0", 1}}, c), ValidationError);
    CHECK_THROWS_AS(TunerConfig::from_json({{"optimizer", "lbfgs"}}, c), ValidationError);
}

TEST_CASE("sample_shots") {
    std::vector<int> y;
    for (int i = 0; i < 30; ++i) y.push_back(i % 3);
    const LabelVector labels(y, 3);

    SUBCASE("k per class, distinct, from the right class") {
        const auto s = sample_shots(labels, 4, 11);
        CHECK(s.indices.size() == 12);
        CHECK(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size() == 12);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t r = 0; r < 4; ++r) CHECK(labels[s.indices[4 * c + r]] == static_cast<int>(c));
        CHECK(s.warnings.empty());
    }
    SUBCASE("deterministic per seed") {
        CHECK(sample_shots(labels, 4, 11).indices == sample_shots(labels, 4, 11).indices);
        CHECK(sample_shots(labels, 4, 11).indices != sample_shots(labels, 4, 12).indices);
    }
    SUBCASE("k = 1 gives one index per class") {
        const auto s = sample_shots(labels, 1, 3);
        CHECK(s.indices.size() == 3);
    }
    SUBCASE("k beyond class size takes everything and warns") {
        const auto s = sample_shots(labels, 50, 3);
        CHECK(s.indices.size() == 30);
        CHECK(s.warnings.size() == 3);
    }
    SUBCASE("empty category") {
        CHECK_THROWS_WITH_AS(sample_shots(LabelVector({0, 0, 2}, 3), 1, 0), doctest::Contains("empty category 1"),
                             ValidationError);
    }
    SUBCASE("every subset is reachable") {
        // 5 choose 2 subsets of one class; 400 seeds should hit all of them.
        const LabelVector one({0, 0, 0, 0, 0, 1}, 2);
        std::set<std::vector<std::size_t>> seen;
        for (std::uint64_t s = 0; s < 400; ++s) {
            auto idx = sample_shots(one, 2, s).indices;
            idx.pop_back();
            seen.insert(idx);
        }
        CHECK(seen.size() == 10);
    }
}

TEST_CASE("loss values at known points") {
    SUBCASE("all similarities equal gives CE = log M") {
        // Prompts orthogonal to every image.
        Matrix img(4, 5, 0.0), prompts(3, 5, 0.0);
        for (std::size_t i = 0; i < 4; ++i) img(i, i % 2) = 1.0;
        for (std::size_t j = 0; j < 3; ++j) prompts(j, 2 + j) = 1.0;
        const LabelVector y({0, 1, 2, 0}, 3);
        const auto l = forward_loss(EmbeddingMatrix(img, true), y, prompts, TunerConfig{});
        CHECK(l.cross_entropy == doctest::Approx(std::log(3.0)).epsilon(1e-15));
        CHECK(l.total == l.cross_entropy);
    }
    SUBCASE("saturated prompts give CE ~ 0 and a vanishing gradient") {
        Matrix img(6, 4, 0.0), prompts(3, 4, 0.0);
        for (std::size_t i = 0; i < 6; ++i) img(i, i % 3) = 1.0;
        for (std::size_t j = 0; j < 3; ++j) prompts(j, j) = 1.0;
        const LabelVector y({0, 1, 2, 0, 1, 2}, 3);
        TunerConfig cfg;
        cfg.tau = 0.01;
        const EmbeddingMatrix images(img, true);
        CHECK(forward_loss(images, y, prompts, cfg).cross_entropy < 1e-40);
        const auto g = loss_gradient(images, y, prompts, cfg);
        for (double v : g.values()) CHECK(std::abs(v) < 1e-9);
    }
    SUBCASE("uniform patch softmax contributes nothing") {
        Matrix img(2, 4, 0.0), prompts(2, 4, 0.0);
        img(0, 0) = img(1, 1) = 1.0;
        prompts(0, 0) = prompts(1, 1) = 1.0;
        Tensor3 local(2, 1, 4, 0.0);
        local(0, 0, 3) = local(1, 0, 3) = 1.0;  // orthogonal to both prompts
        TunerConfig cfg;
        cfg.locoop_weight = 1.0;
        cfg.topk = 1;
        const auto l = forward_loss(EmbeddingMatrix(img, local, true), LabelVector({0, 1}, 2), prompts, cfg);
        CHECK(l.selected_patches == 1);  // tie puts class 0 first, so sample 1's patch is selected
        CHECK(std::abs(l.ood) < 1e-15);
    }
    SUBCASE("regularizer without patches is an error") {
        auto in = random_instance(1);
        TunerConfig cfg;
        cfg.locoop_weight = 0.5;
        CHECK_THROWS_AS(forward_loss(in.images.without_local(), in.labels, in.prompts, cfg), ValidationError);
    }
}

TEST_CASE("patch selection follows the top-K rule") {
    const auto in = random_instance(3, 8, 4, 16, 5);
    TunerConfig cfg;
    cfg.topk = 2;
    const auto sel = select_id_irrelevant_patches(in.images, in.labels, in.prompts, cfg);
    std::set<std::pair<std::size_t, std::size_t>> chosen(sel.begin(), sel.end());
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            std::vector<double> s(4);
            for (std::size_t j = 0; j < 4; ++j) s[j] = dot(in.images.local()->patch(i, k), in.prompts.row(j));
            const double own = s[static_cast<std::size_t>(in.labels[i])];
            const auto higher = std::count_if(s.begin(), s.end(), [&](double v) { return v > own; });
            CHECK((higher >= 2) == (chosen.count({i, k}) == 1));
        }
}

TEST_CASE("analytic gradient matches central differences") {
    for (double tau : {0.01, 0.1, 1.0}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto in = random_instance(seed);
            TunerConfig cfg;
            cfg.tau = tau;
            cfg.locoop_weight = 0.7;
            cfg.topk = 1;
            const auto sel = select_id_irrelevant_patches(in.images, in.labels, in.prompts, cfg);
            const auto g = loss_gradient(in.images, in.labels, in.prompts, cfg, &sel);
            const double h = 1e-5;
            double worst = 0.0;
            for (std::size_t j = 0; j < 3; ++j)
                for (std::size_t t = 0; t < 16; ++t) {
                    const double fd = central_difference(in, cfg, sel, j, t, h);
                    worst = std::max(worst, std::abs(g(j, t) - fd) / std::max({std::abs(g(j, t)), std::abs(fd), 1e-6}));
                }
            CAPTURE(tau);
            CAPTURE(seed);
            CHECK(worst < 1e-4);
        }
    }
}

TEST_CASE("regularizer gradient is linear in its weight") {
    const auto in = random_instance(7);
    TunerConfig base;
    base.tau = 0.1;
    base.topk = 1;
    const auto sel = select_id_irrelevant_patches(in.images, in.labels, in.prompts, base);
    auto with = [&](double w) {
        TunerConfig c = base;
        c.locoop_weight = w;
        return loss_gradient(in.images, in.labels, in.prompts, c, &sel);
    };
    const auto g0 = loss_gradient(in.images.without_local(), in.labels, in.prompts, base);
    const auto g1 = with(1.0), g3 = with(3.0);
    for (std::size_t e = 0; e < g0.values().size(); ++e) {
        const double r1 = g1.values()[e] - g0.values()[e];
        const double r3 = g3.values()[e] - g0.values()[e];
        CHECK(r3 == doctest::Approx(3.0 * r1).epsilon(1e-9).scale(1e-12));
    }
}

TEST_CASE("train") {
    const auto in = random_instance(11, 30, 3, 16, 2);
    SUBCASE("zero epochs returns the init") {
        TunerConfig cfg;
        cfg.epochs = 0;
        const auto r = train(in.images, in.labels, in.prompts, cfg);
        CHECK(r.prompts.values == in.prompts);
        CHECK(r.trace.empty());
    }
    SUBCASE("unit rows after every step, deterministic, CE goes down") {
        TunerConfig cfg;
        cfg.epochs = 25;
        cfg.locoop_weight = 0.3;
        const auto a = train(in.images, in.labels, in.prompts, cfg);
        const auto b = train(in.images, in.labels, in.prompts, cfg);
        CHECK(a.prompts.values == b.prompts.values);
        REQUIRE(a.trace.size() == 26);
        CHECK(a.trace.front().epoch == 0);
        CHECK(a.trace.back().epoch == 25);
        CHECK(a.trace.back().loss.cross_entropy < a.trace.front().loss.cross_entropy);
        for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(norm2(a.prompts.values.row(j)) - 1.0) < 1e-9);
        const auto csv = trace_to_csv(a.trace);
        CHECK(csv.rfind("epoch,loss,cross_entropy,ood,selected_patches\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 27);
    }
    SUBCASE("sgd works too") {
        TunerConfig cfg;
        cfg.epochs = 20;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.learning_rate = 0.01;
        const auto r = train(in.images, in.labels, in.prompts, cfg);
        CHECK(r.trace.back().loss.cross_entropy < r.trace.front().loss.cross_entropy);
    }
    SUBCASE("unconstrained training keeps raw rows; scoring copy is unit") {
        TunerConfig cfg;
        cfg.epochs = 10;
        cfg.unit_norm = false;
        cfg.learning_rate = 0.1;
        const auto r = train(in.images, in.labels, in.prompts, cfg);
        const auto s = scoring_prompts(r.prompts);
        for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(norm2(s.row(j)) - 1.0) < 1e-12);
    }
    SUBCASE("divergence names the epoch") {
        TunerConfig cfg;
        cfg.epochs = 5;
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.unit_norm = false;
        cfg.learning_rate = 1e306;
        CHECK_THROWS_WITH_AS(train(in.images, in.labels, in.prompts, cfg), doctest::Contains("diverged"), ValidationError);
    }
}

TEST_CASE("separable 3-class task, 5-shot: CE decreases") {
    Rng rng(42);
    const std::size_t d = 16;
    const auto centers = testutil::random_unit_matrix(rng, 3, d);
    Matrix img(60, d);
    std::vector<int> y(60);
    for (std::size_t i = 0; i < 60; ++i) {
        y[i] = static_cast<int>(i % 3);
        for (std::size_t t = 0; t < d; ++t) img(i, t) = centers(y[i], t) + 0.1 * rng.gaussian();
    }
    testutil::normalize_rows(img);
    const EmbeddingMatrix images(img, true);
    const LabelVector labels(y, 3);
    const auto sel = sample_shots(labels, 5, 42);
    TunerConfig cfg;
    const auto r = train(images.select_rows(sel.indices), labels.select(sel.indices), testutil::random_unit_matrix(rng, 3, d), cfg);
    CHECK(r.trace.back().loss.cross_entropy < r.trace.front().loss.cross_entropy);
}

TEST_CASE("shots_sweep") {
    testutil::TempDir dir;
    SynthConfig sc;
    sc.d = 16;
    sc.samples_per_split = 30;
    const auto bench = load_benchmark(generate_benchmark(sc, dir.path()));
    TunerConfig cfg;
    cfg.epochs = 10;

    CHECK(shots_sweep(bench, cfg, {}).empty());
    const auto pts = shots_sweep(bench, cfg, {1, 3});
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].shots == 1);
    CHECK(pts[0].seed != pts[1].seed);
    CHECK(pts[1].report.prompts == "tuned 3-shot");
    const auto csv = sweep_to_csv(pts);
    CHECK(csv.rfind("shots,seed,split,auroc,fpr95,id_top1\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
    CHECK(sweep_to_csv(shots_sweep(bench, cfg, {1, 3})) == csv);

    SUBCASE("one sample per class: the 1-shot point equals training on everything") {
        // Keep exactly one id_train sample per class.
        auto m = load_manifest(dir / "manifest.json");
        const auto& train_split = *bench.find(SplitRole::IdTrain);
        std::vector<std::size_t> first(4);
        for (std::size_t c = 0; c < 4; ++c) first[c] = c;  // labels are i % M
        save_embeddings(train_split.select_rows(first), dir / "one.osem");
        save_labels(bench.id_train_labels->select(first), dir / "one.labels.json");
        m.splits[SplitRole::IdTrain] = {"one.osem", "one.labels.json"};
        save_manifest(m, dir / "one.json");
        const auto small = load_benchmark(dir / "one.json");
        const auto pt = shots_sweep(small, cfg, {1});
        const auto all = train(*small.find(SplitRole::IdTrain), *small.id_train_labels,
                               build_class_text_matrix(small.hierarchy).level(0), cfg);
        const auto direct = evaluate(small, ScorerSpec{}, ClassTextEmbeddings({scoring_prompts(all.prompts)}));
        CHECK(pt[0].report.to_json()["ood"] == direct.to_json()["ood"]);
    }
}
