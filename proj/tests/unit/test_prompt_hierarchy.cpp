#include <doctest.h>

#include <cmath>

#include "oodscope/embedding_store.hpp"
#include "oodscope/error.hpp"
#include "oodscope/prompt_hierarchy.hpp"
#include "support.hpp"

using namespace oodscope;
using testutil::TempDir;

namespace {

std::vector<double> unit_vec(Rng& rng, std::size_t d) {
    auto m = testutil::random_unit_matrix(rng, 1, d);
    return {m.values().begin(), m.values().end()};
}

PromptHierarchy random_hierarchy(Rng& rng, std::size_t M, std::size_t L, std::size_t per_cell, std::size_t d) {
    std::vector<PromptClass> classes;
    for (std::size_t j = 0; j < M; ++j) {
        PromptClass c;
        c.name = "c" + std::to_string(j);
        for (std::size_t l = 0; l < L; ++l) {
            std::vector<PromptRecord> cell;
            for (std::size_t k = 0; k < per_cell; ++k)
                cell.push_back({"p" + std::to_string(j) + std::to_string(l) + std::to_string(k), unit_vec(rng, d)});
            c.levels.push_back(cell);
        }
        classes.push_back(c);
    }
    return PromptHierarchy(d, classes);
}

}  // namespace

TEST_CASE("hierarchy invariants") {
    Rng rng(1);
    const PromptRecord a{"a", {1, 0, 0}}, wrong_d{"b", {1, 0}};
    CHECK_THROWS_AS(PromptHierarchy(3, {{"x", {{a}}}}), ValidationError);  // M < 2
    CHECK_THROWS_AS(PromptHierarchy(3, {{"x", {{a}}}, {"y", {{a}, {a}}}}), ValidationError);  // ragged L
    CHECK_THROWS_AS(PromptHierarchy(3, {{"x", {{a}}}, {"y", {{}}}}), ValidationError);  // empty cell
    CHECK_THROWS_AS(PromptHierarchy(3, {{"x", {{a}}}, {"y", {{wrong_d}}}}), ValidationError);
    const auto h = random_hierarchy(rng, 3, 4, 2, 5);
    CHECK(h.num_classes() == 3);
    CHECK(h.num_levels() == 4);
    CHECK(h.truncated(2).num_levels() == 2);
    CHECK_THROWS_AS(h.truncated(5), ValidationError);
}

TEST_CASE("build_class_text_matrix") {
    SUBCASE("single prompt per cell is returned unchanged") {
        Rng rng(2);
        const auto h = random_hierarchy(rng, 3, 2, 1, 6);
        const auto t = build_class_text_matrix(h);
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t l = 0; l < 2; ++l)
                for (std::size_t c = 0; c < 6; ++c)
                    CHECK(t.level(l)(j, c) == doctest::Approx(h.cell(j, l)[0].embedding[c]).epsilon(1e-15));
    }
    SUBCASE("two orthogonal prompts average to the diagonal") {
        const PromptHierarchy h(2, {{"x", {{{"a", {1, 0}}, {"b", {0, 1}}}}}, {"y", {{{"c", {1, 0}}}}}});
        const auto t = build_class_text_matrix(h);
        CHECK(t.level(0)(0, 0) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
        CHECK(t.level(0)(0, 1) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
    }
    SUBCASE("five random prompts: unit norm and inside the cone") {
        Rng rng(3);
        const std::size_t d = 8;
        const auto h = random_hierarchy(rng, 4, 3, 5, d);
        const auto t = build_class_text_matrix(h);
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t j = 0; j < 4; ++j) {
                CHECK(std::abs(norm2(t.level(l).row(j)) - 1.0) < 1e-12);
                // The output is a positive multiple of the prompt sum.
                std::vector<double> sum(d, 0.0);
                for (const auto& p : h.cell(j, l))
                    for (std::size_t c = 0; c < d; ++c) sum[c] += p.embedding[c];
                const double s = norm2(sum);
                for (std::size_t c = 0; c < d; ++c) CHECK(t.level(l)(j, c) == doctest::Approx(sum[c] / s).epsilon(1e-12));
            }
    }
    SUBCASE("non-unit prompt is rejected") {
        const PromptHierarchy h(2, {{"x", {{{"a", {2, 0}}}}}, {"y", {{{"c", {1, 0}}}}}});
        CHECK_THROWS_AS(build_class_text_matrix(h), ValidationError);
    }
    SUBCASE("antipodal prompts cancel") {
        const PromptHierarchy h(2, {{"x", {{{"a", {1, 0}}, {"b", {-1, 0}}}}}, {"y", {{{"c", {1, 0}}}}}});
        CHECK_THROWS_WITH_AS(build_class_text_matrix(h), "zero-norm prompt mean at (0, 0)", ValidationError);
    }
}

TEST_CASE("level_similarities") {
    SUBCASE("self similarity and orthogonality") {
        const ClassTextEmbeddings t({Matrix(2, 3, {1, 0, 0, 0, 1, 0})});
        const EmbeddingMatrix img(Matrix(2, 3, {1, 0, 0, 0, 0, 1}), true);
        const auto s = level_similarities(img, t);
        CHECK(s[0](0, 0) == 1.0);
        CHECK(s[0](0, 1) == 0.0);
        CHECK(s[0](1, 0) == 0.0);
        CHECK(s[0](1, 1) == 0.0);
    }
    SUBCASE("matches a naive loop") {
        Rng rng(4);
        const auto images = EmbeddingMatrix(testutil::random_unit_matrix(rng, 30, 12), true);
        std::vector<Matrix> levels;
        for (int l = 0; l < 3; ++l) levels.push_back(testutil::random_unit_matrix(rng, 5, 12));
        const auto s = level_similarities(images, ClassTextEmbeddings(levels));
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t i = 0; i < 30; ++i)
                for (std::size_t j = 0; j < 5; ++j) {
                    double ref = 0.0;
                    for (std::size_t c = 0; c < 12; ++c) ref += images.global()(i, c) * levels[l](j, c);
                    CHECK(std::abs(s[l](i, j) - ref) < 1e-12);
                }
    }
    SUBCASE("dimension mismatch") {
        Rng rng(5);
        const auto images = EmbeddingMatrix(testutil::random_unit_matrix(rng, 3, 8), true);
        const ClassTextEmbeddings t({testutil::random_unit_matrix(rng, 2, 6)});
        CHECK_THROWS_WITH_AS(level_similarities(images, t), doctest::Contains("dimension mismatch"), ValidationError);
    }
}

TEST_CASE("aggregate_levels") {
    const std::vector<Matrix> two{Matrix(1, 2, {0.2, 0.0}), Matrix(1, 2, {0.4, 0.0})};
    SUBCASE("L = 1 is the identity") {
        Rng rng(6);
        const auto m = testutil::uniform_matrix(rng, 4, 3, -1, 1);
        for (auto mode : {AggregationMode::Mean, AggregationMode::Max}) CHECK(aggregate_levels({m}, {mode, {}}) == m);
    }
    SUBCASE("mean") { CHECK(aggregate_levels(two, {AggregationMode::Mean, {}})(0, 0) == doctest::Approx(0.3).epsilon(1e-15)); }
    SUBCASE("max") { CHECK(aggregate_levels(two, {AggregationMode::Max, {}})(0, 0) == 0.4); }
    SUBCASE("weighted") {
        CHECK(aggregate_levels(two, {AggregationMode::Weighted, {0.25, 0.75}})(0, 0) == doctest::Approx(0.35).epsilon(1e-15));
    }
    SUBCASE("weights are validated") {
        CHECK_THROWS_AS(aggregate_levels(two, {AggregationMode::Weighted, {0.5}}), ValidationError);
        CHECK_THROWS_AS(aggregate_levels(two, {AggregationMode::Weighted, {0.5, 0.6}}), ValidationError);
        CHECK_THROWS_AS(aggregate_levels(two, {AggregationMode::Weighted, {-0.5, 1.5}}), ValidationError);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(aggregate_levels({Matrix(1, 2), Matrix(2, 2)}, {}), ValidationError);
    }
    CHECK(parse_aggregation("max") == AggregationMode::Max);
    CHECK_THROWS_AS(parse_aggregation("median"), ValidationError);
}

TEST_CASE("hierarchy JSON round trip, inline and by reference") {
    TempDir dir;
    Rng rng(7);
    const auto h = random_hierarchy(rng, 3, 2, 2, 4);
    save_hierarchy(h, dir / "h.json");
    const auto back = load_hierarchy(dir / "h.json");
    REQUIRE(back.num_classes() == 3);
    CHECK(back.classes()[1].name == "c1");
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t k = 0; k < 2; ++k) {
                CHECK(back.cell(j, l)[k].text == h.cell(j, l)[k].text);
                CHECK(back.cell(j, l)[k].embedding == h.cell(j, l)[k].embedding);
            }

    // The same prompts stored in an OSEM file and referenced by row.
    Matrix rows(2, 4);
    for (std::size_t c = 0; c < 4; ++c) {
        rows(0, c) = c == 0 ? 1.0 : 0.0;
        rows(1, c) = c == 1 ? 1.0 : 0.0;
    }
    std::filesystem::create_directories(dir / "emb");
    save_embeddings(EmbeddingMatrix(rows, true), dir / "emb" / "text.osem");
    testutil::write_text(dir / "ref.json", R"({"d": 4, "M": 2, "L": 1, "classes": [
        {"name": "a", "levels": [[{"text": "t0", "embedding": {"file": "emb/text.osem", "row": 0}}]]},
        {"name": "b", "levels": [[{"text": "t1", "embedding": {"file": "emb/text.osem", "row": 1}}]]}]})");
    const auto ref = load_hierarchy(dir / "ref.json");
    CHECK(ref.cell(1, 0)[0].embedding == std::vector<double>{0, 1, 0, 0});

    testutil::write_text(dir / "oob.json", R"({"d": 4, "M": 2, "L": 1, "classes": [
        {"name": "a", "levels": [[{"text": "t0", "embedding": {"file": "emb/text.osem", "row": 5}}]]},
        {"name": "b", "levels": [[{"text": "t1", "embedding": {"file": "emb/text.osem", "row": 1}}]]}]})");
    CHECK_THROWS_AS(load_hierarchy(dir / "oob.json"), ValidationError);
    CHECK_THROWS_AS(load_hierarchy(dir / "missing.json"), IoError);
}

TEST_CASE("hierarchy_from_matrix") {
    const auto h = hierarchy_from_matrix(Matrix(2, 3, {1, 0, 0, 0, 1, 0}), {"a", "b"});
    CHECK(h.num_levels() == 1);
    CHECK(h.cell(1, 0).size() == 1);
    CHECK(h.cell(1, 0)[0].embedding == std::vector<double>{0, 1, 0});
}
