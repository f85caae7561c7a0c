#include "crce/clip_text_encoder.hpp"
#include "crce/coref_generator.hpp"
#include "crce/curation_http.hpp"
#include "crce/embedding.hpp"
#include "crce/error.hpp"
#include "crce/orchestrator.hpp"
#include "crce/toy_backend.hpp"
#include "crce/toy_world.hpp"
#include "crce/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace crce;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// 0 ok, 1 partial failure, 2 missing input file, 3 usage or config error, 4 runtime error.
constexpr int kExitPartial = 1;
constexpr int kExitMissing = 2;
constexpr int kExitConfig = 3;
constexpr int kExitRuntime = 4;

struct Globals {
    std::string config;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    std::string out = "crce_out";
    int jobs = 1;
    bool json = false;
    std::string preset = "default";
    std::vector<std::string> argv;
};

/// Erasure flags; only flags actually given override the config file.
struct ErasureFlags {
    double eta = 0, lr = 0, noise_sigma = 0, sphere_radius = 0;
    int iterations = 0, M = 0, N = 0;
    std::string variant, certainty_mode, noise_side, scope, optimizer;
    std::vector<std::pair<CLI::Option*, std::function<void(ErasureConfig&)>>> setters;

    void attach(CLI::App& app) {
        auto add = [&](CLI::Option* o, std::function<void(ErasureConfig&)> f) { setters.emplace_back(o, std::move(f)); };
        add(app.add_option("--eta", eta, "Negative guidance"), [this](ErasureConfig& c) { c.eta = eta; });
        add(app.add_option("--iterations", iterations, "Optimizer steps"),
            [this](ErasureConfig& c) { c.iterations = iterations; });
        add(app.add_option("--lr", lr, "Learning rate"), [this](ErasureConfig& c) { c.learning_rate = lr; });
        add(app.add_option("-M,--num-corefs", M, "Corefs per step"), [this](ErasureConfig& c) { c.M = M; });
        add(app.add_option("-N,--num-retains", N, "Retains per step"), [this](ErasureConfig& c) { c.N = N; });
        add(app.add_option("--variant", variant, "crce | crce_fixed | crce_sphere | esd_only"),
            [this](ErasureConfig& c) { c.variant = parse_variant(variant); });
        add(app.add_option("--certainty-mode", certainty_mode, "llm | uniform_one | noise"),
            [this](ErasureConfig& c) { c.certainty_mode = parse_certainty_mode(certainty_mode); });
        add(app.add_option("--noise-sigma", noise_sigma, "Certainty noise half-width"),
            [this](ErasureConfig& c) { c.noise_sigma = noise_sigma; });
        add(app.add_option("--noise-side", noise_side, "coref | retain | both"),
            [this](ErasureConfig& c) { c.noise_side = parse_noise_side(noise_side); });
        add(app.add_option("--scope", scope, "cross_attention_kv | full"),
            [this](ErasureConfig& c) { c.param_scope = parse_param_scope(scope); });
        add(app.add_option("--sphere-radius", sphere_radius, "Ball radius for crce_sphere"),
            [this](ErasureConfig& c) { c.sphere_radius = sphere_radius; });
        add(app.add_option("--optimizer", optimizer, "sgd | adam"),
            [this](ErasureConfig& c) { c.optimizer = parse_optimizer(optimizer); });
    }

    void apply(ErasureConfig& c) const {
        for (const auto& [opt, set] : setters)
            if (opt->count() > 0)
                set(c);
    }
};

RunConfig effective_config(const Globals& g, const ErasureFlags* flags = nullptr) {
    if (g.preset != "default" && g.preset != "toy")
        throw ConfigError("--preset must be default or toy");
    RunConfig c = load_run_config(g.config.empty() ? std::nullopt : std::optional<fs::path>(g.config),
                                  g.preset == "toy");
    if (g.seed_opt && g.seed_opt->count() > 0)
        c.erasure.seed = g.seed;
    if (flags)
        flags->apply(c.erasure);
    c.erasure.validate();
    return c;
}

CorefConceptDataset require_dataset(const std::string& path) {
    if (path.empty())
        throw ConfigError("--dataset is required");
    if (!fs::exists(path))
        throw MissingInputError("dataset not found: " + path);
    return load_dataset(path);
}

void finish(const Globals& g, RunManifest& m, const std::string& status = "ok") {
    m.status = status;
    auto path = write_manifest(g.out, m);
    if (!g.json)
        std::cerr << "manifest: " << path.string() << "\n";
}

void print_json(const ordered_json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_generate(const Globals& g, const std::string& targets_file, const std::string& category,
                 const std::string& out_file) {
    auto config = effective_config(g);
    auto targets = read_targets_file(targets_file);
    auto manifest = begin_run(g.out, "generate", config, g.argv);
    auto client = make_chat_client(config.llm);
    auto result = generate_dataset(targets, parse_category(category), *client, config.erasure.seed);

    const fs::path dataset_path = out_file.empty() ? fs::path(g.out) / "dataset.json" : fs::path(out_file);
    if (dataset_path.has_parent_path())
        fs::create_directories(dataset_path.parent_path());
    save_dataset(result.dataset, dataset_path);
    ordered_json report;
    report["records"] = result.dataset.concepts.size();
    report["failures"] = ordered_json::array();
    for (const auto& f : result.failures)
        report["failures"].push_back({{"target", f.target}, {"error", f.error}, {"attempts", f.attempts}});
    report["violations"] = ordered_json::object();
    for (const auto& [id, vs] : result.violations) {
        ordered_json a = ordered_json::array();
        for (const auto& v : vs)
            a.emplace_back(to_json(v));
        report["violations"][id] = std::move(a);
    }
    const fs::path report_path = fs::path(g.out) / "generate_report.json";
    atomic_write(report_path, report.dump(2) + "\n");

    manifest.dataset_digest = dataset_digest(result.dataset);
    manifest.artifacts["dataset"] = dataset_path;
    manifest.artifacts["report"] = report_path;
    const bool failed = !result.failures.empty();
    finish(g, manifest, failed ? "partial" : "ok");
    if (g.json)
        print_json(report);
    else
        std::cout << result.dataset.concepts.size() << " records written to " << dataset_path.string() << ", "
                  << result.failures.size() << " targets failed\n";
    return failed ? kExitPartial : 0;
}

int cmd_curate_serve(const Globals& g, const std::string& dataset_path, std::optional<int> port,
                     const std::string& host, const std::string& origin) {
    auto config = effective_config(g);
    if (!fs::exists(dataset_path))
        throw MissingInputError("dataset not found: " + dataset_path);
    if (port)
        config.curation.port = *port;
    if (!host.empty())
        config.curation.host = host;
    if (!origin.empty())
        config.curation.ui_origin = origin;
    auto manifest = begin_run(g.out, "curate-serve", config, g.argv);
    auto client = make_chat_client(config.llm);
    CurationService service(dataset_path, client.get());
    CurationServer server(service, config.curation);
    const int bound = server.bind();
    std::cerr << "serving " << dataset_path << " on http://" << config.curation.host << ":" << bound
              << " (UI origin " << config.curation.ui_origin << ")\n";

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    std::jthread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        server.stop();
    });
    server.listen();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();

    manifest.dataset_digest = dataset_digest(service.snapshot());
    manifest.artifacts["dataset"] = dataset_path;
    finish(g, manifest);
    return 0;
}

int cmd_analyze(const Globals& g, const std::string& dataset_path, const std::string& target,
                const std::vector<std::string>& corefs, const std::vector<std::string>& retains) {
    auto config = effective_config(g);
    if (target.empty())
        throw ConfigError("--target is required");
    auto manifest = begin_run(g.out, "analyze-embeddings", config, g.argv);
    auto encoder = make_encoder(config.encoder);
    DistanceReport report;
    if (!dataset_path.empty()) {
        auto dataset = require_dataset(dataset_path);
        const auto* r = dataset.find(target);
        if (!r)
            throw ValidationError("dataset has no record '" + target + "'");
        report = distance_report(r->target, *r, *encoder);
        manifest.dataset_digest = dataset_digest(dataset);
    } else {
        if (corefs.empty() && retains.empty())
            throw ConfigError("give --dataset or at least one of --corefs/--retains");
        report = distance_report(target, corefs, retains, *encoder);
    }
    fs::create_directories(g.out);
    const fs::path csv = fs::path(g.out) / "distances.csv";
    atomic_write(csv, distance_report_csv(report));
    manifest.artifacts["distances"] = csv;
    finish(g, manifest);

    ordered_json j;
    j["target"] = report.target;
    j["encoder"] = report.encoder_id;
    j["rows"] = ordered_json::array();
    for (const auto& row : report.rows)
        j["rows"].push_back({{"group", row.group == ConceptGroup::Coref ? "coref" : "retain"},
                             {"text", row.text},
                             {"certainty", row.certainty ? json(certainty_label(*row.certainty)) : json(nullptr)},
                             {"cosine", row.cosine},
                             {"euclidean", row.euclidean},
                             {"identity_ok", row.identity_ok}});
    if (g.json)
        print_json(j);
    else
        std::cout << distance_report_csv(report);
    return 0;
}

int cmd_train(const Globals& g, const ErasureFlags& flags, const std::string& dataset_path, const std::string& target) {
    auto config = effective_config(g, &flags);
    auto dataset = require_dataset(dataset_path);
    if (target.empty())
        throw ConfigError("--target is required");
    auto manifest = begin_run(g.out, "train", config, g.argv);
    manifest.dataset_digest = dataset_digest(dataset);
    auto a = train_to_directory(dataset, target, config, g.out);
    manifest.artifacts["checkpoint"] = a.checkpoint;
    manifest.artifacts["checkpoint_manifest"] = a.sidecar;
    manifest.artifacts["log"] = a.log;
    finish(g, manifest);
    if (g.json)
        print_json(to_json(a.manifest));
    else
        std::cout << "checkpoint " << a.checkpoint.string() << " (" << a.manifest.steps << " steps, params "
                  << a.manifest.params_digest.substr(0, 16) << ")\n";
    return 0;
}

int cmd_evaluate(const Globals& g, const std::string& checkpoint, const std::string& dataset_path, std::string target,
                 std::string method, const std::string& judge_kind, const std::string& judge_fixtures,
                 std::optional<int> n_images, std::optional<int> workers) {
    auto config = effective_config(g);
    if (checkpoint.empty())
        throw ConfigError("--checkpoint is required");
    if (checkpoint != "pretrained" && !fs::exists(checkpoint))
        throw MissingInputError("checkpoint not found: " + checkpoint);
    if (checkpoint != "pretrained") {
        const auto sidecar = sidecar_path(checkpoint);
        if (fs::exists(sidecar)) {
            auto m = checkpoint_manifest_from_json(json::parse(read_file(sidecar)));
            if (target.empty())
                target = m.record_id;
            if (method.empty())
                method = std::string(to_string(m.config.variant));
        }
    }
    if (target.empty())
        throw ConfigError("--target is required when the checkpoint has no manifest");
    if (method.empty())
        method = checkpoint == "pretrained" ? "original" : "crce";
    if (!judge_kind.empty())
        config.judge.kind = judge_kind;
    if (!judge_fixtures.empty())
        config.judge.fixtures = judge_fixtures;
    if (n_images)
        config.eval.n_images = *n_images;
    if (workers)
        config.eval.workers = *workers;
    else if (g.jobs > 1)
        config.eval.workers = g.jobs;

    auto dataset = require_dataset(dataset_path);
    auto manifest = begin_run(g.out, "evaluate", config, g.argv);
    manifest.dataset_digest = dataset_digest(dataset);
    auto a = evaluate_to_directory(checkpoint, dataset, target, config, g.out, method);
    manifest.artifacts["report"] = a.report_json;
    manifest.artifacts["report_markdown"] = a.report_markdown;
    manifest.artifacts["verdicts"] = a.verdicts;
    const bool partial = a.result.report.partial;
    finish(g, manifest, partial ? "partial" : "ok");
    if (g.json)
        print_json(to_json(a.result.report));
    else
        std::cout << compare_reports({a.result.report}).markdown;
    return partial ? kExitPartial : 0;
}

int cmd_ablate(const Globals& g, const ErasureFlags& flags, const std::string& dataset_path, const std::string& target,
               const std::string& sweep) {
    if (sweep.empty())
        throw ConfigError("--sweep is required (mn_grid or certainty)");
    auto config = effective_config(g, &flags);
    if (target.empty())
        throw ConfigError("--target is required");
    auto dataset = require_dataset(dataset_path);
    AblationOptions o;
    o.dataset = fs::absolute(dataset_path);
    o.target = target;
    o.kind = parse_sweep_kind(sweep);
    o.out_dir = g.out;
    o.jobs = g.jobs;
    o.executable = fs::read_symlink("/proc/self/exe");

    auto manifest = begin_run(g.out, "ablate", config, g.argv);
    manifest.dataset_digest = dataset_digest(dataset);
    auto outcomes = run_ablation(o, config);
    auto merged = merge_sweep(o.kind, outcomes);
    const fs::path md = fs::path(g.out) / (std::string(to_string(o.kind)) + ".md");
    const fs::path csv = fs::path(g.out) / (std::string(to_string(o.kind)) + ".csv");
    atomic_write(md, merged.markdown);
    atomic_write(csv, merged.csv);
    manifest.artifacts["table"] = md;
    manifest.artifacts["csv"] = csv;
    bool failed = false;
    for (const auto& c : outcomes) {
        failed |= !c.report;
        if (c.report)
            manifest.artifacts["cell:" + c.cell.name] = fs::path(g.out) / "cells" / c.cell.name / "eval_report.json";
    }
    finish(g, manifest, failed ? "partial" : "ok");
    if (g.json) {
        ordered_json j = ordered_json::array();
        for (const auto& c : outcomes) {
            ordered_json cj;
            cj["cell"] = c.cell.name;
            cj["M"] = c.cell.config.M;
            cj["N"] = c.cell.config.N;
            cj["report"] = c.report ? ordered_json(to_json(*c.report)) : ordered_json(nullptr);
            if (!c.error.empty())
                cj["error"] = c.error;
            j.push_back(std::move(cj));
        }
        print_json(j);
    } else {
        std::cout << merged.markdown;
    }
    return failed ? kExitPartial : 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& files) {
    auto config = effective_config(g);
    if (files.empty())
        throw ConfigError("--reports needs at least one eval_report.json");
    std::vector<EvalReport> reports;
    for (const auto& f : files) {
        if (!fs::exists(f))
            throw MissingInputError("report not found: " + f);
        reports.push_back(eval_report_from_json(json::parse(read_file(f))));
    }
    auto manifest = begin_run(g.out, "report", config, g.argv);
    auto cmp = compare_reports(reports);
    const fs::path md = fs::path(g.out) / "comparison.md";
    const fs::path csv = fs::path(g.out) / "comparison.csv";
    atomic_write(md, cmp.markdown);
    atomic_write(csv, cmp.csv);
    manifest.artifacts["markdown"] = md;
    manifest.artifacts["csv"] = csv;
    finish(g, manifest);
    if (g.json) {
        ordered_json j = ordered_json::array();
        for (const auto& r : reports)
            j.push_back(to_json(r));
        print_json(j);
    } else {
        std::cout << cmp.markdown;
    }
    return 0;
}

int cmd_toy_pretrain(const Globals& g, int steps, const std::string& out_file) {
    auto config = effective_config(g);
    auto manifest = begin_run(g.out, "toy-pretrain", config, g.argv);
    toy::ToyDiffusionBackend backend;
    toy::ToyTextEncoder encoder;
    toy::PretrainOptions opts;
    opts.steps = steps;
    const double loss = backend.pretrain(encoder, opts);
    const fs::path path = out_file.empty() ? fs::path(g.out) / "toy_pretrained.bin" : fs::path(out_file);
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    backend.save_checkpoint(backend.pretrained(), path);
    manifest.artifacts["weights"] = path;
    finish(g, manifest);
    std::cout << "final loss " << loss << ", weights " << path.string() << "\n";
    return 0;
}

int cmd_toy_dataset(const Globals& g, const std::string& out_file, std::uint64_t split_seed) {
    auto config = effective_config(g);
    auto manifest = begin_run(g.out, "toy-dataset", config, g.argv);
    CorefConceptDataset d;
    d.concepts.push_back(toy::dog_record(split_seed));
    const fs::path path = out_file.empty() ? fs::path(g.out) / "toy_dataset.json" : fs::path(out_file);
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    save_dataset(d, path);
    manifest.dataset_digest = dataset_digest(d);
    manifest.artifacts["dataset"] = path;
    finish(g, manifest);
    std::cout << path.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Coreference-retention concept erasure toolkit"};
    app.require_subcommand(1);
    Globals g;
    g.argv.assign(argv, argv + argc);
    app.add_option("--config", g.config, "JSON config file (sections erasure, llm, judge, backend, encoder, eval, curation)");
    g.seed_opt = app.add_option("--seed", g.seed, "Run seed");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_option("--jobs", g.jobs, "Parallel subprocesses or judge workers")->check(CLI::PositiveNumber);
    app.add_flag("--json", g.json, "Machine-readable output only");
    app.add_option("--preset", g.preset, "Defaults layer: default or toy")->capture_default_str();

    auto sub = [&](const char* name, const char* help) {
        auto* s = app.add_subcommand(name, help);
        s->fallthrough();
        return s;
    };

    std::string dataset, target, category = "object", targets_file, out_file, method, sweep, judge_kind, judge_fixtures,
                                 host, origin;
    std::vector<std::string> corefs, retains, reports;
    std::string checkpoint;
    std::optional<int> port, n_images, workers;
    int pretrain_steps = 10000;
    std::uint64_t split_seed = 0;
    ErasureFlags train_flags, ablate_flags;

    auto* gen = sub("generate", "Draft coref/retain records for a list of targets with an LLM");
    gen->add_option("--targets", targets_file, "One target per line")->required();
    gen->add_option("--category", category, "object | ip | celebrity")->capture_default_str();
    gen->add_option("--dataset-out", out_file, "Dataset file to write (default OUT/dataset.json)");

    auto* serve = sub("curate-serve", "Serve a dataset to the curation UI");
    serve->add_option("--dataset", dataset)->required();
    serve->add_option("--port", port);
    serve->add_option("--host", host);
    serve->add_option("--ui-origin", origin);

    auto* analyze = sub("analyze-embeddings", "Cosine and Euclidean distances of corefs and retains to the target");
    analyze->add_option("--dataset", dataset);
    analyze->add_option("--target", target);
    analyze->add_option("--corefs", corefs)->delimiter(',');
    analyze->add_option("--retains", retains)->delimiter(',');

    auto* train = sub("train", "Erase a target concept");
    train->add_option("--dataset", dataset)->required();
    train->add_option("--target", target)->required();
    train_flags.attach(*train);

    auto* eval = sub("evaluate", "Judge generated images for the five accuracy groups");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file or 'pretrained'")->required();
    eval->add_option("--dataset", dataset)->required();
    eval->add_option("--target", target);
    eval->add_option("--method", method);
    eval->add_option("--judge", judge_kind, "toy | mock | remote");
    eval->add_option("--judge-fixtures", judge_fixtures);
    eval->add_option("--n-images", n_images);
    eval->add_option("--workers", workers);

    auto* ablate = sub("ablate", "Run an M x N grid or certainty-perturbation sweep");
    ablate->add_option("--dataset", dataset)->required();
    ablate->add_option("--target", target)->required();
    ablate->add_option("--sweep", sweep, "mn_grid | certainty");
    ablate_flags.attach(*ablate);

    auto* report = sub("report", "Compare evaluation reports");
    report->add_option("--reports", reports)->required();

    auto* pretrain = sub("toy-pretrain", "Pretrain the toy backend's reference weights");
    pretrain->add_option("--steps", pretrain_steps)->capture_default_str();
    pretrain->add_option("--weights-out", out_file);

    auto* toyds = sub("toy-dataset", "Write the toy world's approved dog record");
    toyds->add_option("--dataset-out", out_file);
    toyds->add_option("--split-seed", split_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*gen) return cmd_generate(g, targets_file, category, out_file);
        if (*serve) return cmd_curate_serve(g, dataset, port, host, origin);
        if (*analyze) return cmd_analyze(g, dataset, target, corefs, retains);
        if (*train) return cmd_train(g, train_flags, dataset, target);
        if (*eval) return cmd_evaluate(g, checkpoint, dataset, target, method, judge_kind, judge_fixtures, n_images, workers);
        if (*ablate) return cmd_ablate(g, ablate_flags, dataset, target, sweep);
        if (*report) return cmd_report(g, reports);
        if (*pretrain) return cmd_toy_pretrain(g, pretrain_steps, out_file);
        if (*toyds) return cmd_toy_dataset(g, out_file, split_seed);
    } catch (const MissingInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitConfig;
}
