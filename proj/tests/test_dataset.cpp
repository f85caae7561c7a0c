#include "crce/certainty.hpp"
#include "crce/dataset.hpp"
#include "crce/error.hpp"
#include "crce/util.hpp"

#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <random>
#include <set>

using namespace crce;
namespace fs = std::filesystem;

namespace {

const fs::path kSamples = fs::path(CRCE_SOURCE_DIR) / "data" / "corefconcept_samples.json";

ConceptRecord well_formed(const std::string& target = "Dog") {
    ConceptRecord r;
    r.target = target;
    r.state = RecordState::Approved;
    for (int i = 0; i < 10; ++i) {
        r.corefs.train.push_back({"coref " + std::to_string(i), Certainty::High});
        r.retains.train.push_back({"retain " + std::to_string(i), Certainty::Normal});
    }
    for (int i = 10; i < 15; ++i) {
        r.corefs.test.push_back({"coref " + std::to_string(i), Certainty::Low});
        r.retains.test.push_back({"retain " + std::to_string(i), Certainty::VeryLow});
    }
    return r;
}

bool has_code(const std::vector<Violation>& vs, const std::string& code, const std::string& path = {}) {
    for (const auto& v : vs)
        if (v.code == code && (path.empty() || v.path == path))
            return true;
    return false;
}

fs::path temp_file(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("crce_test_dataset_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("certainty labels map onto the five weights") {
    CHECK(certainty_to_weight("Very High") == 1.0);
    CHECK(certainty_to_weight("High") == 0.8);
    CHECK(certainty_to_weight("Normal") == 0.6);
    CHECK(certainty_to_weight("Low") == 0.4);
    CHECK(certainty_to_weight("Very Low") == 0.2);

    std::set<double> weights;
    for (auto c : kAllCertainties) {
        weights.insert(certainty_to_weight(c));
        CHECK(parse_certainty(certainty_label(c)) == c);
    }
    CHECK(weights == std::set<double>{1.0, 0.8, 0.6, 0.4, 0.2});
}

TEST_CASE("certainty parsing is tolerant on read and strict about unknown labels") {
    CHECK(parse_certainty("very high") == Certainty::VeryHigh);
    CHECK(parse_certainty(" VERY_LOW ") == Certainty::VeryLow);
    CHECK(parse_certainty("very-high") == Certainty::VeryHigh);
    CHECK_FALSE(try_parse_certainty("Medium"));
    try {
        certainty_to_weight("Banana");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("Banana") != std::string::npos);
    }
}

TEST_CASE("validate_record accepts a well-formed approved record") {
    CHECK(validate_record(well_formed()).empty());
}

TEST_CASE("validate_record flags a short training list") {
    auto r = well_formed();
    r.corefs.train.pop_back();
    auto vs = validate_record(r);
    REQUIRE(vs.size() == 1);
    CHECK(vs[0].code == "LIST_LENGTH");
    CHECK(vs[0].path == "corefs.train");
}

TEST_CASE("draft records may hold a whole 15-entry pool on the train side") {
    auto r = well_formed();
    r.state = RecordState::Draft;
    for (auto& e : r.corefs.test)
        r.corefs.train.push_back(e);
    r.corefs.test.clear();
    CHECK(validate_record(r).empty());
    r.state = RecordState::Approved;
    CHECK(has_code(validate_record(r), "LIST_LENGTH", "corefs.train"));
    CHECK(has_code(validate_record(r), "LIST_LENGTH", "corefs.test"));
}

TEST_CASE("validate_record detects overlap, duplicates and the target among retains") {
    auto r = well_formed();
    r.retains.train[0].text = "coref 3";
    CHECK(has_code(validate_record(r), "SET_OVERLAP"));

    r = well_formed();
    r.corefs.test[0].text = "COREF 1!";
    CHECK(has_code(validate_record(r), "DUPLICATE", "corefs.test[0]"));

    r = well_formed();
    r.retains.test[2].text = "dog";
    CHECK(has_code(validate_record(r), "TARGET_IN_RETAIN", "retains.test[2]"));

    r = well_formed();
    r.corefs.train[4].text = "   ";
    CHECK(has_code(validate_record(r), "EMPTY_TEXT", "corefs.train[4]"));
}

TEST_CASE("dataset validation catches repeated (target, disambiguation) pairs") {
    CorefConceptDataset d;
    d.concepts = {well_formed("bat"), well_formed("Bat")};
    CHECK(has_code(validate_dataset(d), "DUPLICATE_TARGET"));
    d.concepts[0].disambiguation = "animal";
    d.concepts[1].disambiguation = "sports equipment";
    CHECK(validate_dataset(d).empty());
    CHECK(d.concepts[0].id() == "bat-animal");
}

TEST_CASE("the shipped sample dataset loads and validates cleanly") {
    auto d = load_dataset(kSamples);
    REQUIRE(d.concepts.size() == 4);
    CHECK(validate_dataset(d).empty());
    const auto* horse = d.find("Horse");
    REQUIRE(horse);
    CHECK(horse->corefs.train[0].text == "mare");
    CHECK(horse->corefs.train[0].certainty == Certainty::VeryHigh);
    const auto* bat = d.find("bat-animal");
    REQUIRE(bat);
    CHECK(bat->disambiguation == std::optional<std::string>("animal"));
    CHECK(d.find("Tom Cruise") != nullptr);
    CHECK(d.find("Katniss Everdeen") != nullptr);
}

TEST_CASE("save then load is the identity and keeps the digest") {
    auto d = load_dataset(kSamples);
    auto path = temp_file("roundtrip.json");
    save_dataset(d, path);
    auto back = load_dataset(path);
    CHECK(back == d);
    CHECK(dataset_digest(back) == dataset_digest(d));
    CHECK(sha256_file(path) == sha256_hex(dump_dataset(d)));
}

TEST_CASE("random records survive serialisation") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> level(0, 4), len(0, 12);
    for (int trial = 0; trial < 50; ++trial) {
        CorefConceptDataset d;
        for (int k = 0; k < 3; ++k) {
            ConceptRecord r;
            r.target = "concept " + std::to_string(trial) + "-" + std::to_string(k);
            r.category = static_cast<Category>(k % 3);
            r.revision = trial;
            if (k == 1)
                r.disambiguation = "sense";
            for (auto* list : {&r.corefs.train, &r.corefs.test, &r.retains.train, &r.retains.test}) {
                const int n = len(rng);
                for (int i = 0; i < n; ++i)
                    list->push_back({"w" + std::to_string(rng() % 1000) + " é", static_cast<Certainty>(level(rng))});
            }
            d.concepts.push_back(r);
        }
        CHECK(parse_dataset(dump_dataset(d)) == d);
    }
}

TEST_CASE("parse errors name the offending entry") {
    auto j = dataset_to_json(load_dataset(kSamples));
    j["concepts"][0]["corefs"]["train"][3].erase("certainty");
    try {
        parse_dataset(j.dump());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.where() == "concepts[0].corefs.train[3]");
    }

    auto v = dataset_to_json(load_dataset(kSamples));
    v["version"] = "2.0";
    CHECK_THROWS_AS(parse_dataset(v.dump()), ParseError);

    try {
        parse_dataset("{\n  \"version\": \"1.0\",\n  \"concepts\": [\n  oops\n]}");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.where() == "line 4");
    }
}

TEST_CASE("certainty labels are written canonically") {
    auto r = well_formed();
    r.corefs.train[0].certainty = Certainty::VeryHigh;
    auto j = record_to_json(r);
    CHECK(j["corefs"]["train"][0]["certainty"] == "Very High");
    j["corefs"]["train"][0]["certainty"] = "very_high";
    CHECK(record_from_json(j).corefs.train[0].certainty == Certainty::VeryHigh);
}
