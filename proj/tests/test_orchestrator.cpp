#include "crce/coref_generator.hpp"
#include "crce/orchestrator.hpp"
#include "crce/toy_world.hpp"
#include "crce/util.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

using namespace crce;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(CRCE_CLI) + " " + args + " 2>/dev/null";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p);
    CliResult r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, p))
        r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path toy_dataset(const fs::path& dir) {
    CorefConceptDataset d;
    d.concepts.push_back(toy::dog_record());
    save_dataset(d, dir / "toy.json");
    return dir / "toy.json";
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

} // namespace

TEST_CASE("config precedence: defaults, preset, file") {
    auto c = load_run_config(std::nullopt);
    CHECK(c.erasure.eta == 1.0);
    CHECK(c.erasure.iterations == 500);
    CHECK(c.erasure.learning_rate == 1e-5);
    CHECK(c.erasure.M == 5);
    CHECK(c.erasure.N == 3);
    auto t = load_run_config(std::nullopt, true);
    CHECK(t.erasure.M == 3);
    CHECK(t.erasure.learning_rate == 1e-3);

    auto dir = crce::testing::scratch_dir("config");
    std::ofstream(dir / "c.json") << R"({"erasure": {"M": 7}, "eval": {"n_images": 4}})";
    auto f = load_run_config(dir / "c.json", true);
    CHECK(f.erasure.M == 7);
    CHECK(f.erasure.N == 2);
    CHECK(f.eval.n_images == 4);

    auto back = run_config_from_json(json::parse(to_json(f).dump()));
    CHECK(config_digest(back) == config_digest(f));
    CHECK(config_digest(back) != config_digest(t));

    CHECK_THROWS_AS(run_config_from_json(json{{"erasure", {{"etta", 1}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json(json{{"training", json::object()}}), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "absent.json"), MissingInputError);
}

TEST_CASE("run manifests never collide") {
    auto dir = crce::testing::scratch_dir("manifests");
    RunConfig c;
    std::set<std::string> ids;
    for (int i = 0; i < 20; ++i) {
        auto m = begin_run(dir, "train", c);
        CHECK(ids.insert(m.run_id).second);
        auto p = write_manifest(dir, m);
        CHECK(fs::exists(p));
    }
    CHECK(std::distance(fs::directory_iterator(dir / "manifests"), fs::directory_iterator{}) == 20);
}

TEST_CASE("manifests record artifact digests") {
    auto dir = crce::testing::scratch_dir("manifest_artifacts");
    std::ofstream(dir / "a.txt") << "abc";
    auto m = begin_run(dir, "report", RunConfig{});
    m.artifacts["a"] = dir / "a.txt";
    auto p = write_manifest(dir, m);
    auto j = json::parse(read_file(p));
    CHECK(j.dump().find(sha256_hex("abc")) != std::string::npos);
}

TEST_CASE("sweep cells") {
    auto base = toy_erasure_preset();
    auto grid = sweep_cells(SweepKind::MnGrid, base);
    CHECK(grid.size() == 16);
    std::set<std::pair<int, int>> mn;
    for (const auto& c : grid) {
        mn.insert({c.config.M, c.config.N});
        CHECK(c.name == "M" + std::to_string(c.config.M) + "_N" + std::to_string(c.config.N));
        CHECK(c.config.learning_rate == base.learning_rate);
    }
    CHECK(mn.size() == 16);

    auto cert = sweep_cells(SweepKind::Certainty, base);
    std::vector<std::string> names;
    for (const auto& c : cert)
        names.push_back(c.name);
    std::vector<std::string> want{"nocert",     "coref-0",     "coref-0.2",   "coref-0.4", "retain-0",
                                  "retain-0.2", "retain-0.4", "both-0.2", "both-0.4"};
    CHECK(names == want);
    CHECK(cert[0].config.certainty_mode == CertaintyMode::UniformOne);
    CHECK(cert[2].config.certainty_mode == CertaintyMode::Noise);
    CHECK(cert[2].config.noise_side == NoiseSide::Coref);
    CHECK(cert[2].config.noise_sigma == 0.2);
    CHECK(parse_sweep_kind("certainty") == SweepKind::Certainty);
    CHECK_THROWS(parse_sweep_kind("grid"));
}

TEST_CASE("merged sweep tables list failed cells") {
    auto cells = sweep_cells(SweepKind::MnGrid, toy_erasure_preset());
    std::vector<CellOutcome> outs;
    for (const auto& c : cells) {
        CellOutcome o{c, std::nullopt, {}};
        if (c.name == "M10_N10") {
            o.error = "exit code 4";
        } else {
            EvalReport r;
            r.target = "dog";
            r.method = c.name;
            r.acc_r_train = 0.01 * c.config.M;
            o.report = r;
        }
        outs.push_back(o);
    }
    auto m = merge_sweep(SweepKind::MnGrid, outs);
    CHECK(m.markdown.find("FAILED") != std::string::npos);
    CHECK(m.markdown.find("M10_N10: exit code 4") != std::string::npos);
    CHECK(m.csv.find("M10_N10,10,10,,,,,,failed") != std::string::npos);
    CHECK(m.csv.find("M5_N3,5,3,0.00,0.00,0.00,5.00,0.00,ok") != std::string::npos);
}

TEST_CASE("generation isolates per-target failures and splits ambiguous targets") {
    MockChatClient llm;
    auto reply_for = [&](const std::string& target, std::vector<ProposalPools> senses) {
        llm.add_response(request_hash(build_generation_prompt(target, Category::Object)),
                         render_generation_response(senses));
    };
    reply_for("horse", {crce::testing::make_pools("horse")});
    reply_for("apple", {crce::testing::make_pools("apple", "fruit"), crce::testing::make_pools("apple", "company")});
    llm.add_failure(request_hash(build_generation_prompt("kiwi", Category::Object)), "503 from upstream");

    auto r = generate_dataset({"horse", "kiwi", "apple"}, Category::Object, llm, 11);
    REQUIRE(r.failures.size() == 1);
    CHECK(r.failures[0].target == "kiwi");
    CHECK(r.dataset.concepts.size() == 3);
    for (const auto& c : r.dataset.concepts) {
        CHECK(c.state == RecordState::Draft);
        CHECK(c.corefs.train.size() == 10);
        CHECK(c.corefs.test.size() == 5);
    }
    CHECK(r.dataset.find("apple-fruit"));
    CHECK(r.dataset.find("apple-company"));
    CHECK(r.dataset.find("apple-fruit")->disambiguation == "fruit");

    auto again = generate_dataset({"horse", "kiwi", "apple"}, Category::Object, llm, 11);
    CHECK(dataset_digest(again.dataset) == dataset_digest(r.dataset));
}

TEST_CASE("targets file skips comments and blank lines") {
    auto dir = crce::testing::scratch_dir("targets");
    std::ofstream(dir / "t.txt") << "# objects\nhorse\n\n  apple  \n";
    CHECK(read_targets_file(dir / "t.txt") == std::vector<std::string>{"horse", "apple"});
}

TEST_CASE("checkpoint sidecar round-trip") {
    CheckpointManifest m;
    m.backend = "toy";
    m.target = "dog";
    m.record_id = "dog";
    m.config = toy_erasure_preset();
    m.steps = 3;
    m.final_loss = LossBreakdown{1, 2, 3, 6};
    auto back = checkpoint_manifest_from_json(json::parse(to_json(m).dump()));
    CHECK(to_json(back) == to_json(m));
    CHECK(sidecar_path("out/checkpoint.bin") == fs::path("out/checkpoint.json"));
}

TEST_CASE("CLI train uses documented defaults and writes a checkpoint") {
    auto dir = crce::testing::scratch_dir("cli_train");
    auto data = toy_dataset(dir);
    auto r = run_cli("--json --out " + q(dir / "run") + " train --dataset " + q(data) + " --target dog --iterations 0");
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["config"]["eta"] == 1.0);
    CHECK(j["config"]["learning_rate"] == 1e-5);
    CHECK(j["config"]["M"] == 5);
    CHECK(j["config"]["N"] == 3);
    CHECK(j["config"]["param_scope"] == "cross_attention_kv");
    CHECK(j["steps"] == 0);
    CHECK(fs::exists(dir / "run" / "checkpoint.bin"));
    CHECK(fs::exists(dir / "run" / "checkpoint.json"));
    CHECK(!fs::is_empty(dir / "run" / "manifests"));
}

TEST_CASE("CLI exit codes") {
    auto dir = crce::testing::scratch_dir("cli_codes");
    auto data = toy_dataset(dir);
    const std::string base = "--out " + q(dir / "run") + " ";
    CHECK(run_cli(base + "train --dataset " + q(data) + " --target dog --variant crce_sphere").code == 3);
    CHECK(run_cli(base + "train --dataset " + q(dir / "nope.json") + " --target dog").code == 2);
    CHECK(run_cli(base + "evaluate --checkpoint " + q(dir / "missing.bin") + " --dataset " + q(data)).code == 2);
    CHECK(run_cli(base + "ablate --dataset " + q(data) + " --target dog").code == 3);
    CHECK(run_cli(base + "train --dataset " + q(data) + " --target dog --variant nonsense").code == 3);
    CHECK(run_cli(base + "frobnicate").code == 3);
    CHECK(run_cli(base + "train --dataset " + q(data) + " --target unicorn --iterations 0").code == 3);
}

TEST_CASE("CLI evaluate report matches a recount of its verdict log") {
    auto dir = crce::testing::scratch_dir("cli_eval");
    auto data = toy_dataset(dir);
    std::ofstream(dir / "judge.json") << R"({"default": "No.", "rules": [
        {"match": {"concept": "dog", "seed": 0}, "reply": "Yes."},
        {"match": {"concept": "kitten"}, "reply": "yes"},
        {"match": {"prompt": "wolf", "seed": 1}, "reply": "I can't say"}]})";
    auto r = run_cli("--json --out " + q(dir / "run") + " evaluate --checkpoint pretrained --dataset " + q(data) +
                     " --target dog --judge mock --judge-fixtures " + q(dir / "judge.json") + " --n-images 3 --workers 4");
    REQUIRE(r.code == 0);
    auto report = json::parse(r.out);
    CHECK(report["method"] == "original");

    std::map<std::string, std::pair<int, int>> tally;
    std::istringstream lines(read_file(dir / "run" / "verdicts.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        auto v = json::parse(line);
        ++n;
        if (v["answer"].is_null())
            continue;
        auto& t = tally[v["group"].get<std::string>()];
        t.first += v["answer"] == "yes";
        t.second += 1;
    }
    CHECK(n == 3 * 31);
    const std::map<std::string, std::string> key{{"target", "acc_u"},
                                                 {"coref_train", "acc_c_train"},
                                                 {"coref_test", "acc_c_test"},
                                                 {"retain_train", "acc_r_train"},
                                                 {"retain_test", "acc_r_test"}};
    for (const auto& [group, col] : key) {
        CAPTURE(group);
        const auto [yes, judged] = tally[group];
        REQUIRE(judged > 0);
        CHECK(report[col].get<double>() == doctest::Approx(static_cast<double>(yes) / judged));
    }
    CHECK(report["acc_u"].get<double>() == doctest::Approx(1.0 / 3));
}

TEST_CASE("CLI analyze-embeddings over word lists") {
    auto dir = crce::testing::scratch_dir("cli_analyze");
    auto r = run_cli("--json --out " + q(dir) + " analyze-embeddings --target dog --corefs puppy,hound --retains cat");
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["rows"].size() == 3);
    for (const auto& row : j["rows"])
        CHECK(row["identity_ok"] == true);
    CHECK(fs::exists(dir / "distances.csv"));
}
