#include "crce/evaluator.hpp"
#include "crce/judge.hpp"
#include "crce/toy_backend.hpp"
#include "crce/util.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <atomic>
#include <random>

using namespace crce;
using nlohmann::json;

namespace {

/// Image with the prompt and seed in its metadata; prompts starting with "broken" fail.
class FakeSource : public ImageSource {
public:
    GeneratedImage generate(const std::string& prompt, std::uint64_t seed) override {
        ++calls;
        if (prompt.rfind("broken", 0) == 0)
            throw Error("backend exploded");
        GeneratedImage g;
        g.prompt = prompt;
        g.seed = seed;
        g.image_id = prompt_hash(prompt) + "/" + std::to_string(seed);
        return g;
    }
    std::atomic<int> calls{0};
};

/// Replies from a list in order, then repeats the last one.
class ScriptedJudge : public Judge {
public:
    explicit ScriptedJudge(std::vector<std::string> replies) : replies_(std::move(replies)) {}
    std::string id() const override { return "scripted"; }
    std::string ask(const GeneratedImage&, const std::string&) override {
        const auto i = std::min<std::size_t>(calls++, replies_.size() - 1);
        if (replies_[i] == "THROW")
            throw TransportError("judge offline", 3);
        return replies_[i];
    }
    std::atomic<std::size_t> calls{0};

private:
    std::vector<std::string> replies_;
};

ConceptRecord small_record() {
    auto r = toy::dog_record();
    return r;
}

} // namespace

TEST_CASE("judge prompt embeds and recovers the concept") {
    auto p = build_judge_prompt("Dog <puppy> & co");
    CHECK(p.find("<puppy>") == std::string::npos);
    CHECK(concept_from_judge_prompt(p) == "Dog <puppy> & co");
    CHECK_FALSE(concept_from_judge_prompt("is this a dog?"));
    CHECK_THROWS_AS(build_judge_prompt("  "), ValidationError);
}

TEST_CASE("verdict parsing") {
    CHECK(parse_verdict("Yes.") == Answer::Yes);
    CHECK(parse_verdict("no") == Answer::No);
    CHECK(parse_verdict("  YES, it is a dog") == Answer::Yes);
    CHECK(parse_verdict("The answer is: No!") == Answer::No);
    CHECK(parse_verdict("Nope... actually yes") == Answer::Yes);
    CHECK_THROWS_AS(parse_verdict("I don't know"), AmbiguousVerdict);
    CHECK_THROWS_AS(parse_verdict("yesterday nothing"), AmbiguousVerdict);
    CHECK_THROWS_AS(parse_verdict(""), AmbiguousVerdict);
}

TEST_CASE("mock judge rules match metadata, prompt and concept") {
    auto m = MockJudge::from_json(json::parse(R"({
        "default": "No.",
        "rules": [
            {"match": {"prompt": "puppy", "seed": 2}, "reply": "Yes."},
            {"match": {"concept": "cat"}, "reply": "yes"},
            {"match": {"colour": "red"}, "reply": "Yes!"}
        ]})"));
    GeneratedImage img;
    img.prompt = "puppy";
    img.seed = 2;
    CHECK(m.ask(img, build_judge_prompt("dog")) == "Yes.");
    img.seed = 3;
    CHECK(m.ask(img, build_judge_prompt("dog")) == "No.");
    CHECK(m.ask(img, build_judge_prompt("cat")) == "yes");
    img.metadata["colour"] = "red";
    CHECK(m.ask(img, build_judge_prompt("dog")) == "Yes!");
}

TEST_CASE("toy judge classifies by nearest component") {
    ToyJudge j;
    GeneratedImage img;
    img.metadata = {{"x", 2.0}, {"y", 0.1}};
    CHECK(parse_verdict(j.ask(img, build_judge_prompt("puppy"))) == Answer::Yes);
    CHECK(parse_verdict(j.ask(img, build_judge_prompt("cat"))) == Answer::No);
    img.metadata = {{"x", 0.0}, {"y", 0.0}};
    CHECK(parse_verdict(j.ask(img, build_judge_prompt("dog"))) == Answer::No);
    GeneratedImage bare;
    CHECK_THROWS_AS(j.ask(bare, build_judge_prompt("dog")), ValidationError);
}

TEST_CASE("group evaluation tallies every (prompt, seed) pair") {
    FakeSource src;
    auto judge = MockJudge::from_json(json::parse(R"({"default":"No.","rules":[
        {"match": {"prompt": "a", "seed": 0}, "reply": "Yes"},
        {"match": {"prompt": "a", "seed": 1}, "reply": "Yes"},
        {"match": {"prompt": "b", "seed": 3}, "reply": "yes"}]})"));
    EvalOptions o;
    o.n_images = 4;
    o.workers = 3;
    auto g = evaluate_prompt_group(src, {"a", "b"}, {"dog", "dog"}, judge, EvalGroup::CorefTrain, o);
    REQUIRE(g.prompts.size() == 2);
    CHECK(g.prompts[0].yes == 2);
    CHECK(g.prompts[1].yes == 1);
    CHECK(g.judged() == 8);
    CHECK(g.yes_rate() == doctest::Approx(3.0 / 8));
    CHECK(g.verdicts.size() == 8);
    CHECK(src.calls == 8);
    CHECK_FALSE(g.partial());
}

TEST_CASE("group evaluation preconditions") {
    FakeSource src;
    MockJudge j;
    EvalOptions o;
    o.n_images = 0;
    CHECK_THROWS_AS(evaluate_prompt_group(src, {"a"}, {"a"}, j, EvalGroup::Target, o), ValidationError);
    o.n_images = 2;
    o.seeds = {1, 2, 3};
    CHECK_THROWS_AS(evaluate_prompt_group(src, {"a"}, {"a"}, j, EvalGroup::Target, o), ValidationError);
    o.seeds = {};
    CHECK_THROWS_AS(evaluate_prompt_group(src, {"a", "b"}, {"a"}, j, EvalGroup::Target, o), ValidationError);
    CHECK(o.effective_seeds() == std::vector<std::uint64_t>{0, 1});
}

TEST_CASE("ambiguous replies are retried once") {
    FakeSource src;
    ScriptedJudge j({"hmm", "Yes."});
    EvalOptions o;
    o.n_images = 1;
    auto g = evaluate_prompt_group(src, {"a"}, {"dog"}, j, EvalGroup::Target, o);
    CHECK(j.calls == 2);
    CHECK(g.yes() == 1);
    CHECK(g.ambiguous() == 0);
}

TEST_CASE("persistent ambiguity follows the policy") {
    EvalOptions o;
    o.n_images = 2;
    SUBCASE("conservative counts against erasure") {
        FakeSource src;
        ScriptedJudge j({"unclear"});
        auto g = evaluate_prompt_group(src, {"a"}, {"dog"}, j, EvalGroup::CorefTest, o);
        CHECK(g.yes() == 2);
        CHECK(g.judged() == 2);
        CHECK(g.ambiguous() == 2);
        CHECK(g.verdicts[0].imputed);
    }
    SUBCASE("conservative counts against retention") {
        FakeSource src;
        ScriptedJudge j({"unclear"});
        auto g = evaluate_prompt_group(src, {"a"}, {"a"}, j, EvalGroup::RetainTrain, o);
        CHECK(g.yes() == 0);
        CHECK(g.judged() == 2);
    }
    SUBCASE("exclude drops them from the denominator") {
        FakeSource src;
        ScriptedJudge j({"unclear"});
        o.ambiguous = AmbiguousPolicy::Exclude;
        auto g = evaluate_prompt_group(src, {"a"}, {"a"}, j, EvalGroup::RetainTrain, o);
        CHECK(g.judged() == 0);
        CHECK(g.ambiguous() == 2);
        CHECK_FALSE(g.verdicts[0].answer);
    }
}

TEST_CASE("generation and judge failures are flagged, not dropped") {
    FakeSource src;
    MockJudge yes("Yes.");
    EvalOptions o;
    o.n_images = 3;
    auto g = evaluate_prompt_group(src, {"ok", "broken prompt"}, {"ok", "x"}, yes, EvalGroup::RetainTest, o);
    CHECK(g.failed() == 3);
    CHECK(g.partial());
    CHECK(g.judged() == 3);
    CHECK(g.verdicts[3].error.rfind("generation failed", 0) == 0);

    ScriptedJudge down({"THROW"});
    auto h = evaluate_prompt_group(src, {"ok"}, {"ok"}, down, EvalGroup::Target, o);
    CHECK(h.failed() == 3);
    CHECK(h.verdicts[0].error.rfind("judge failed", 0) == 0);
    auto j = to_json(h.verdicts[0]);
    CHECK(j["error"].get<std::string>().find("judge offline") != std::string::npos);
}

TEST_CASE("compute_report averages per-prompt rates") {
    auto rec = small_record();
    std::map<EvalGroup, std::vector<double>> rates{{EvalGroup::Target, {0.0}},
                                                   {EvalGroup::CorefTrain, {0.1, 0.3}},
                                                   {EvalGroup::CorefTest, {0.0, 0.2, 0.4}},
                                                   {EvalGroup::RetainTrain, {1.0, 0.5}},
                                                   {EvalGroup::RetainTest, {0.9}}};
    auto r = compute_report(rec, rates);
    CHECK(r.acc_u == 0.0);
    CHECK(r.acc_c_train == doctest::Approx(0.2));
    CHECK(r.acc_c_test == doctest::Approx(0.2));
    CHECK(r.acc_r_train == doctest::Approx(0.75));
    CHECK(r.acc_r_test == doctest::Approx(0.9));
    CHECK(r.target == "dog");

    auto missing = rates;
    missing.erase(EvalGroup::RetainTest);
    CHECK_THROWS_AS(compute_report(rec, missing), ValidationError);
    auto bad = rates;
    bad[EvalGroup::Target] = {1.5};
    CHECK_THROWS_AS(compute_report(rec, bad), ValidationError);
}

TEST_CASE("random verdict logs recount to the reported accuracies") {
    std::mt19937_64 rng(8);
    auto rec = small_record();
    for (int trial = 0; trial < 50; ++trial) {
        std::map<EvalGroup, GroupResult> groups;
        std::map<EvalGroup, std::pair<int, int>> counts;
        for (auto g : kAllGroups) {
            GroupResult gr;
            const int prompts = 1 + static_cast<int>(rng() % 6);
            for (int p = 0; p < prompts; ++p) {
                PromptTally t;
                t.prompt = "p" + std::to_string(p);
                t.judged = 10;
                t.yes = static_cast<int>(rng() % 11);
                counts[g].first += t.yes;
                counts[g].second += t.judged;
                gr.prompts.push_back(t);
            }
            groups.emplace(g, std::move(gr));
        }
        auto r = compute_report(rec, groups);
        for (auto g : kAllGroups)
            CHECK(r.metric(g) == doctest::Approx(static_cast<double>(counts[g].first) / counts[g].second));
    }
}

TEST_CASE("report JSON and markdown") {
    EvalReport r;
    r.target = "dog";
    r.method = "crce";
    r.acc_u = 0.0;
    r.acc_c_train = 0.0078;
    r.acc_c_test = 0.0;
    r.acc_r_train = 0.8478;
    r.acc_r_test = 0.8123;
    r.seeds = {0, 1};
    r.n_images_per_prompt = 2;
    auto back = eval_report_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));
    CHECK(render_markdown(r) == "| crce | 0.00 | 0.78 | 0.00 | 84.78 | 81.23 |");
    CHECK(format_percent(0.8478) == "84.78");
    CHECK_THROWS_AS(eval_report_from_json(json{{"method", "x"}}), ParseError);
}

TEST_CASE("comparison table bolds the best value per column") {
    EvalReport a, b;
    a.target = b.target = "dog";
    a.method = "original";
    a.acc_u = 0.9;
    a.acc_c_train = 0.8;
    a.acc_c_test = 0.8;
    a.acc_r_train = 0.9;
    a.acc_r_test = 0.85;
    b.method = "crce";
    b.acc_u = 0.0;
    b.acc_c_train = 0.05;
    b.acc_c_test = 0.1;
    b.acc_r_train = 0.8;
    b.acc_r_test = 0.85;
    auto c = compare_reports({a, b});
    CHECK(c.markdown.find("| original | 90.00 | 80.00 | 80.00 | **90.00** | **85.00** |") != std::string::npos);
    CHECK(c.markdown.find("| crce | **0.00** | **5.00** | **10.00** | 80.00 | **85.00** |") != std::string::npos);
    CHECK(c.csv.find("crce,dog,0.00,5.00,10.00,80.00,85.00,acc_u;acc_c_train;acc_c_test;acc_r_test\n") !=
          std::string::npos);
    CHECK_THROWS_AS(compare_reports({}), ValidationError);
}

TEST_CASE("evaluate_record judges corefs against the target") {
    auto rec = small_record();
    FakeSource src;
    auto j = MockJudge::from_json(json::parse(R"({"default":"No.","rules":[{"match":{"concept":"dog"},"reply":"Yes."}]})"));
    EvalOptions o;
    o.n_images = 2;
    auto res = evaluate_record(rec, src, j, o, "original");
    CHECK(res.report.acc_u == 1.0);
    CHECK(res.report.acc_c_train == 1.0);
    CHECK(res.report.acc_c_test == 1.0);
    CHECK(res.report.acc_r_train == 0.0);
    CHECK(res.report.method == "original");
    CHECK(res.groups.at(EvalGroup::CorefTrain).verdicts.size() == rec.corefs.train.size() * 2);

    o.corefs_against_target = false;
    auto self = evaluate_record(rec, src, j, o);
    CHECK(self.report.acc_c_train == 0.0);

    auto dir = crce::testing::scratch_dir("verdicts");
    write_verdict_log(dir / "v.jsonl", res);
    auto text = read_file(dir / "v.jsonl");
    CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(2 * (1 + 15 + 15)));
}

TEST_CASE("backend image source renders deterministic images") {
    auto weights = toy::ToyDiffusionBackend::default_weights();
    REQUIRE(weights);
    auto backend = toy::ToyDiffusionBackend::from_checkpoint(*weights);
    toy::ToyTextEncoder enc;
    auto dir = crce::testing::scratch_dir("image_cache");
    BackendImageSource src(backend, backend.pretrained(), enc, dir);
    auto a = src.generate("dog", 3);
    auto b = src.generate("dog", 3);
    CHECK(a.png == b.png);
    CHECK(a.png.size() > 8);
    CHECK(a.metadata.contains("x"));
    CHECK(a.image_id == prompt_hash("dog") + "/3");
    CHECK(std::filesystem::exists(dir / prompt_hash("dog") / "3.png"));
    CHECK(prompt_hash("dog").size() == 16);
}
