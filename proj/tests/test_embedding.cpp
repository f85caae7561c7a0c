#include "crce/embedding.hpp"
#include "crce/error.hpp"
#include "crce/toy_world.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace crce;

namespace {

Eigen::VectorXd random_unit(std::mt19937_64& rng, int d) {
    std::normal_distribution<double> g;
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i)
        v[i] = g(rng);
    return v.normalized();
}

/// Counts encode_pooled calls so cache behaviour is observable.
class CountingEncoder : public TextEncoder {
public:
    std::string id() const override { return "counting"; }
    EmbeddingVector encode_pooled(const std::string& text) override {
        ++calls;
        return inner.encode_pooled(text);
    }
    Conditioning encode_sequence(const std::string& text) override { return inner.encode_sequence(text); }

    toy::ToyTextEncoder inner;
    int calls = 0;
};

} // namespace

TEST_CASE("cosine of basis vectors and a 60 degree rotation") {
    Eigen::Vector3d e1(1, 0, 0), e2(0, 1, 0);
    CHECK(cosine_similarity(e1, e1) == doctest::Approx(1.0));
    CHECK(cosine_similarity(e1, e2) == doctest::Approx(0.0));
    const double a = std::numbers::pi / 3;
    Eigen::Vector3d r(std::cos(a), std::sin(a), 0);
    CHECK(cosine_similarity(e1, r) == doctest::Approx(e1.dot(r)).epsilon(1e-12));
    CHECK(cosine_similarity(e1, r) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(euclidean_distance(e1, e1) == 0.0);
}

TEST_CASE("distance functions reject mismatched and zero inputs") {
    Eigen::VectorXd a = Eigen::VectorXd::Ones(3), b = Eigen::VectorXd::Ones(4), z = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(cosine_similarity(a, b), ShapeError);
    CHECK_THROWS_AS(euclidean_distance(a, b), ShapeError);
    CHECK_THROWS_AS(cosine_similarity(a, z), ValidationError);
}

TEST_CASE("unit vectors satisfy d^2 = 2(1 - s)") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 2000; ++i) {
        auto u = random_unit(rng, 1 + static_cast<int>(rng() % 64));
        auto v = random_unit(rng, static_cast<int>(u.size()));
        const double s = cosine_similarity(u, v);
        const double d = euclidean_distance(u, v);
        CHECK(std::abs(d * d - 2 * (1 - s)) < 1e-9);
        CHECK(s == doctest::Approx(cosine_similarity(v, u)).epsilon(1e-15));
        CHECK(s <= 1.0);
        CHECK(s >= -1.0);
    }
}

TEST_CASE("chord length matches printed distances") {
    CHECK(std::abs(chord_length(0.9122) - 0.4190) < 1e-3);
    CHECK(std::abs(chord_length(0.9199) - 0.4002) < 1e-3);
    CHECK(chord_length(1.0) == 0.0);
}

TEST_CASE("float embeddings work through the same templates") {
    BasicEmbedding<float> u{Eigen::Vector3f(1, 0, 0), true}, v{Eigen::Vector3f(0, 1, 0), true};
    CHECK(cosine_similarity(u, v) == doctest::Approx(0.0f));
    CHECK(euclidean_distance(u, v) == doctest::Approx(std::sqrt(2.0f)));
}

TEST_CASE("sphere samples stay inside the ball and are centred") {
    std::mt19937_64 rng(3);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(8);
    c[0] = 1.0;
    const int n = 10000;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(8);
    double max_norm = 0, mean_sq = 0;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd d = sphere_sample(c, 0.5, rng) - c;
        max_norm = std::max(max_norm, d.norm());
        mean += d;
        mean_sq += d.squaredNorm();
    }
    mean /= n;
    CHECK(max_norm <= 0.5);
    // Ball-uniform in D dims: E|d|^2 = r^2 D/(D+2), each coordinate has variance r^2/(D+2).
    const double coord_sd = 0.5 / std::sqrt(10.0);
    for (int k = 0; k < 8; ++k)
        CHECK(std::abs(mean[k]) < 3 * coord_sd / std::sqrt(static_cast<double>(n)) + 1e-12);
    CHECK(mean_sq / n == doctest::Approx(0.25 * 8.0 / 10.0).epsilon(0.02));
}

TEST_CASE("sphere sample directions are rotation invariant") {
    std::mt19937_64 rng(17);
    const int n = 20000, bins = 12;
    std::vector<int> hist(bins, 0);
    Eigen::Vector2d c(0.3, -0.2);
    for (int i = 0; i < n; ++i) {
        Eigen::Vector2d d = sphere_sample(c, 1.0, rng) - c;
        double a = std::atan2(d.y(), d.x()) + std::numbers::pi;
        hist[std::min(bins - 1, static_cast<int>(a / (2 * std::numbers::pi) * bins))]++;
    }
    double chi2 = 0;
    const double expect = static_cast<double>(n) / bins;
    for (int h : hist)
        chi2 += (h - expect) * (h - expect) / expect;
    // 11 degrees of freedom, 0.999 quantile is about 31.3.
    CHECK(chi2 < 31.3);
}

TEST_CASE("sphere sampling edge cases") {
    std::mt19937_64 rng(1);
    Eigen::VectorXd c = Eigen::VectorXd::Ones(5);
    CHECK_THROWS_AS(sphere_sample(c, 0.0, rng), ValidationError);
    CHECK_THROWS_AS(sphere_sample(c, -1.0, rng), ValidationError);
    CHECK((sphere_sample(c, 1e-9, rng) - c).norm() <= 1e-9);
    std::mt19937_64 a(42), b(42);
    CHECK(sphere_sample(c, 0.5, a) == sphere_sample(c, 0.5, b));
    EmbeddingVector e{c.normalized(), true};
    auto s = sphere_sample(e, 0.5, rng);
    CHECK_FALSE(s.normalized);
}

TEST_CASE("toy encoder is deterministic and unit norm") {
    toy::ToyTextEncoder enc;
    auto a = enc.encode_pooled("dog");
    auto b = enc.encode_pooled("dog");
    CHECK(a.values == b.values);
    CHECK(a.normalized);
    CHECK(std::abs(a.values.norm() - 1.0) < 1e-6);
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    auto seq = enc.encode_sequence("puppy");
    CHECK(seq.rows() == toy::kTokens);
    CHECK(seq.cols() == toy::kEmbedDim);
    CHECK_THROWS_AS(enc.encode_pooled(""), ValidationError);
}

TEST_CASE("distance report on the toy dog record") {
    toy::ToyTextEncoder enc;
    auto record = toy::dog_record();
    auto report = distance_report("dog", record, enc);
    CHECK(report.rows.size() == 30);
    CHECK(report.encoder_id == "toy-lexicon-v1");
    bool corefs_first = true, seen_retain = false;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        CHECK(r.identity_ok);
        CHECK(std::abs(r.euclidean - chord_length(r.cosine)) < 1e-4);
        if (r.group == ConceptGroup::Retain)
            seen_retain = true;
        else if (seen_retain)
            corefs_first = false;
        if (i > 0 && report.rows[i - 1].group == r.group)
            CHECK(report.rows[i - 1].cosine >= r.cosine);
    }
    CHECK(corefs_first);
    CHECK(report.find("cat") != nullptr);

    auto csv = distance_report_csv(report);
    CHECK(csv.rfind("group,text,certainty,cosine,euclidean,identity_ok\n", 0) == 0);
}

TEST_CASE("distance report from word lists and from an empty record") {
    toy::ToyTextEncoder enc;
    auto r = distance_report("dog", {"puppy"}, {"cat", "kitten"}, enc);
    REQUIRE(r.rows.size() == 3);
    CHECK_FALSE(r.rows[0].certainty);
    ConceptRecord empty;
    empty.target = "dog";
    CHECK(distance_report("dog", empty, enc).rows.empty());
}

TEST_CASE("cached encoder persists pooled embeddings per encoder id") {
    auto dir = crce::testing::scratch_dir("embed_cache");
    auto file = dir / "cache.json";
    auto inner = std::make_shared<CountingEncoder>();
    {
        CachedEncoder cache(inner, file);
        auto a = cache.encode_pooled("dog");
        auto b = cache.encode_pooled("dog");
        CHECK(a.values == b.values);
        CHECK(inner->calls == 1);
        CHECK(cache.hits() == 1);
    }
    REQUIRE(std::filesystem::exists(file));
    CachedEncoder again(inner, file);
    again.encode_pooled("dog");
    CHECK(inner->calls == 1);
    again.encode_pooled("cat");
    CHECK(inner->calls == 2);
}

TEST_CASE("serialized encoder forwards calls") {
    SerializedEncoder s(std::make_shared<toy::ToyTextEncoder>());
    toy::ToyTextEncoder direct;
    CHECK(s.encode_pooled("wolf").values == direct.encode_pooled("wolf").values);
    CHECK(s.encode_sequence("wolf") == direct.encode_sequence("wolf"));
    CHECK(s.id() == direct.id());
}
