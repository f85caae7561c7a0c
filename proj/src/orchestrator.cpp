#include "crce/orchestrator.hpp"

#include "crce/clip_text_encoder.hpp"
#include "crce/coref_generator.hpp"
#include "crce/toy_backend.hpp"
#include "crce/toy_world.hpp"
#include "crce/util.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

extern char** environ;

namespace crce {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string_view to_string(AmbiguousPolicy p) { return p == AmbiguousPolicy::Conservative ? "conservative" : "exclude"; }

AmbiguousPolicy parse_ambiguous_policy(std::string_view s) {
    if (s == "conservative") return AmbiguousPolicy::Conservative;
    if (s == "exclude") return AmbiguousPolicy::Exclude;
    throw ConfigError("ambiguous policy must be conservative or exclude, got '" + std::string(s) + "'");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
    if (!j.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [k, _] : j.items())
        if (!known.contains(k))
            throw ConfigError("unknown key '" + k + "' in config section '" + section + "'");
}

ordered_json loss_json(const LossBreakdown& l) {
    return {{"esd", l.esd_term}, {"coref", l.coref_term}, {"retain", l.retain_term}, {"total", l.total}};
}

} // namespace

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["erasure"] = to_json(c.erasure);
    j["llm"] = to_json(c.llm);
    j["judge"] = to_json(c.judge);
    j["backend"] = {{"kind", c.backend.kind}, {"weights", c.backend.weights}};
    j["encoder"] = {{"kind", c.encoder.kind}, {"model_dir", c.encoder.model_dir}, {"pooling", c.encoder.pooling}};
    j["eval"] = {{"n_images", c.eval.n_images},
                 {"seeds", c.eval.seeds},
                 {"workers", c.eval.workers},
                 {"ambiguous", to_string(c.eval.ambiguous)},
                 {"corefs_against_target", c.eval.corefs_against_target}};
    j["curation"] = {{"host", c.curation.host}, {"port", c.curation.port}, {"ui_origin", c.curation.ui_origin}};
    return j;
}

RunConfig run_config_from_json(const json& j, RunConfig base) {
    reject_unknown(j, {"erasure", "llm", "judge", "backend", "encoder", "eval", "curation"}, "root");
    json merged = to_json(base);
    for (const auto& [k, v] : j.items()) {
        if (!v.is_object())
            throw ConfigError("config section '" + k + "' must be an object");
        if (k == "judge" && v.contains("remote")) {
            merged[k]["remote"].update(v["remote"]);
            json rest = v;
            rest.erase("remote");
            merged[k].update(rest);
        } else {
            merged[k].update(v);
        }
    }
    RunConfig c;
    try {
        c.erasure = erasure_config_from_json(merged["erasure"], ErasureConfig{});
        reject_unknown(merged["llm"], {"endpoint", "model", "api_key_env", "temperature", "max_retries",
                                       "requests_per_minute", "timeout_s", "fixtures"},
                       "llm");
        c.llm = llm_config_from_json(merged["llm"]);
        reject_unknown(merged["judge"], {"kind", "fixtures", "remote"}, "judge");
        c.judge = judge_config_from_json(merged["judge"]);

        const auto& b = merged["backend"];
        reject_unknown(b, {"kind", "weights"}, "backend");
        c.backend.kind = b.at("kind").get<std::string>();
        c.backend.weights = b.at("weights").get<std::string>();

        const auto& e = merged["encoder"];
        reject_unknown(e, {"kind", "model_dir", "pooling"}, "encoder");
        c.encoder.kind = e.at("kind").get<std::string>();
        c.encoder.model_dir = e.at("model_dir").get<std::string>();
        c.encoder.pooling = e.at("pooling").get<std::string>();

        const auto& ev = merged["eval"];
        reject_unknown(ev, {"n_images", "seeds", "workers", "ambiguous", "corefs_against_target"}, "eval");
        c.eval.n_images = ev.at("n_images").get<int>();
        c.eval.seeds = ev.at("seeds").get<std::vector<std::uint64_t>>();
        c.eval.workers = ev.at("workers").get<int>();
        c.eval.ambiguous = parse_ambiguous_policy(ev.at("ambiguous").get<std::string>());
        c.eval.corefs_against_target = ev.at("corefs_against_target").get<bool>();

        const auto& cu = merged["curation"];
        reject_unknown(cu, {"host", "port", "ui_origin"}, "curation");
        c.curation.host = cu.at("host").get<std::string>();
        c.curation.port = cu.at("port").get<int>();
        c.curation.ui_origin = cu.at("ui_origin").get<std::string>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("config: ") + ex.what());
    }
    if (c.backend.kind != "toy")
        throw ConfigError("backend kind '" + c.backend.kind + "' is not available; only 'toy' ships");
    if (c.encoder.kind != "toy" && c.encoder.kind != "clip")
        throw ConfigError("encoder kind must be toy or clip, got '" + c.encoder.kind + "'");
    parse_pooling(c.encoder.pooling);
    if (c.eval.n_images < 1 || c.eval.workers < 1)
        throw ConfigError("eval.n_images and eval.workers must be at least 1");
    return c;
}

RunConfig load_run_config(const std::optional<fs::path>& file, bool toy_preset) {
    RunConfig base;
    if (toy_preset)
        base.erasure = toy_erasure_preset();
    if (!file)
        return base;
    if (!fs::exists(*file))
        throw MissingInputError("config file not found: " + file->string());
    json j;
    try {
        j = json::parse(read_file(*file));
    } catch (const json::exception& e) {
        throw ConfigError(file->string() + ": " + e.what());
    }
    return run_config_from_json(j, base);
}

std::string config_digest(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

std::unique_ptr<DiffusionBackend> make_backend(const BackendSpec& spec) {
    if (spec.kind != "toy")
        throw ConfigError("unknown backend '" + spec.kind + "'");
    fs::path weights = spec.weights;
    if (weights.empty()) {
        auto found = toy::ToyDiffusionBackend::default_weights();
        if (!found)
            throw MissingInputError("toy weights not found; set CRCE_TOY_WEIGHTS or run toy-pretrain");
        weights = *found;
    }
    if (!fs::exists(weights))
        throw MissingInputError("toy weights not found: " + weights.string());
    return std::make_unique<toy::ToyDiffusionBackend>(toy::ToyDiffusionBackend::from_checkpoint(weights));
}

std::shared_ptr<TextEncoder> make_encoder(const EncoderSpec& spec) {
    if (spec.kind == "toy")
        return std::make_shared<toy::ToyTextEncoder>();
    if (spec.kind != "clip")
        throw ConfigError("unknown encoder '" + spec.kind + "'");
    fs::path dir = spec.model_dir;
    if (dir.empty()) {
        auto found = ClipTextEncoder::discover();
        if (!found)
            throw MissingInputError("no CLIP text encoder found; set CRCE_CLIP_MODEL_DIR or encoder.model_dir");
        dir = *found;
    }
    if (!fs::exists(dir))
        throw MissingInputError("CLIP model directory not found: " + dir.string());
    return std::make_shared<SerializedEncoder>(std::make_shared<ClipTextEncoder>(dir, parse_pooling(spec.pooling)));
}

RunManifest begin_run(const fs::path& out_root, std::string command, const RunConfig& config,
                      std::vector<std::string> argv) {
    RunManifest m;
    m.command = std::move(command);
    m.argv = std::move(argv);
    m.config = to_json(config);
    m.config_digest = config_digest(config);
    m.started = utc_timestamp();
    std::string stamp;
    for (char ch : m.started)
        if (std::isalnum(static_cast<unsigned char>(ch)))
            stamp.push_back(ch);
    const fs::path dir = out_root / "manifests";
    fs::create_directories(dir);
    for (int n = 0;; ++n) {
        std::string id = m.command + "-" + stamp + "-" + std::to_string(n);
        // "wx" fails when the file exists, so two runs never share an id.
        if (std::FILE* f = std::fopen((dir / (id + ".json")).c_str(), "wx")) {
            std::fclose(f);
            m.run_id = std::move(id);
            return m;
        }
        if (n > 10000)
            throw Error("cannot allocate a run id under " + dir.string());
    }
}

fs::path write_manifest(const fs::path& out_root, RunManifest& m) {
    const fs::path path = out_root / "manifests" / (m.run_id + ".json");
    if (fs::exists(path) && fs::file_size(path) > 0)
        throw Error("manifest " + path.string() + " already written");
    if (m.finished.empty())
        m.finished = utc_timestamp();
    ordered_json j;
    j["run_id"] = m.run_id;
    j["command"] = m.command;
    j["argv"] = m.argv;
    j["config"] = m.config;
    j["config_digest"] = m.config_digest;
    j["dataset_digest"] = m.dataset_digest.empty() ? json(nullptr) : json(m.dataset_digest);
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["status"] = m.status;
    ordered_json arts = ordered_json::object();
    for (const auto& [name, p] : m.artifacts) {
        ordered_json a;
        a["path"] = p.string();
        if (fs::is_regular_file(p))
            a["sha256"] = sha256_file(p);
        arts[name] = std::move(a);
    }
    j["artifacts"] = std::move(arts);
    atomic_write(path, j.dump(2) + "\n");
    return path;
}

std::vector<std::string> read_targets_file(const fs::path& path) {
    if (!fs::exists(path))
        throw MissingInputError("targets file not found: " + path.string());
    std::istringstream in(read_file(path));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        auto t = trim(line);
        if (!t.empty() && t.front() != '#')
            out.push_back(t);
    }
    return out;
}

GenerateResult generate_dataset(const std::vector<std::string>& targets, Category category, ChatClient& client,
                                std::uint64_t seed) {
    GenerateResult out;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& target = targets[i];
        try {
            auto session = start_session(target, category, client);
            const auto& senses = session.latest();
            const bool ambiguous = senses.size() > 1;
            for (std::size_t s = 0; s < senses.size(); ++s) {
                auto draft = draft_record_from_pools(senses[s], target, category, ambiguous,
                                                     seed + 1000003ULL * i + s);
                if (out.dataset.find(draft.record.id()))
                    throw ValidationError("duplicate record id '" + draft.record.id() + "'");
                out.violations[draft.record.id()] = std::move(draft.violations);
                out.dataset.concepts.push_back(std::move(draft.record));
            }
        } catch (const TransportError& e) {
            out.failures.push_back({target, e.what(), e.attempts()});
        } catch (const Error& e) {
            out.failures.push_back({target, e.what(), 1});
        }
    }
    return out;
}

ordered_json to_json(const CheckpointManifest& m) {
    ordered_json j;
    j["format"] = "crce-checkpoint-1";
    j["backend"] = m.backend;
    j["target"] = m.target;
    j["record_id"] = m.record_id;
    j["config"] = to_json(m.config);
    j["dataset_digest"] = m.dataset_digest;
    j["final_loss"] = m.final_loss ? json(loss_json(*m.final_loss)) : json(nullptr);
    j["steps"] = m.steps;
    j["rng_digest"] = m.rng_digest;
    j["params_digest"] = m.params_digest;
    return j;
}

CheckpointManifest checkpoint_manifest_from_json(const json& j) {
    CheckpointManifest m;
    try {
        m.backend = j.at("backend").get<std::string>();
        m.target = j.at("target").get<std::string>();
        m.record_id = j.at("record_id").get<std::string>();
        m.config = erasure_config_from_json(j.at("config"));
        m.dataset_digest = j.at("dataset_digest").get<std::string>();
        if (const auto& l = j.at("final_loss"); !l.is_null())
            m.final_loss = LossBreakdown{l.at("esd").get<double>(), l.at("coref").get<double>(),
                                         l.at("retain").get<double>(), l.at("total").get<double>()};
        m.steps = j.at("steps").get<int>();
        m.rng_digest = j.at("rng_digest").get<std::string>();
        m.params_digest = j.at("params_digest").get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint manifest: ") + e.what());
    }
    return m;
}

fs::path sidecar_path(const fs::path& checkpoint) {
    fs::path p = checkpoint;
    return p.replace_extension(".json");
}

namespace {

const ConceptRecord& require_record(const CorefConceptDataset& dataset, const std::string& target) {
    const auto* r = dataset.find(target);
    if (!r)
        throw ValidationError("dataset has no record '" + target + "'");
    return *r;
}

} // namespace

TrainArtifacts train_to_directory(const CorefConceptDataset& dataset, const std::string& target,
                                  const RunConfig& config, const fs::path& out_dir) {
    config.erasure.validate();
    const auto& record = require_record(dataset, target);
    auto backend = make_backend(config.backend);
    auto encoder = make_encoder(config.encoder);

    fs::create_directories(out_dir);
    TrainArtifacts a;
    a.checkpoint = out_dir / "checkpoint.bin";
    a.sidecar = sidecar_path(a.checkpoint);
    a.log = out_dir / "train_log.jsonl";

    std::string log;
    auto result = run_training(record, config.erasure, *backend, *encoder,
                               [&](const StepLog& s) { log += to_json(s).dump() + "\n"; });
    backend->save_checkpoint(result.params, a.checkpoint);
    atomic_write(a.log, log);

    auto& m = a.manifest;
    m.backend = backend->id();
    m.target = record.target;
    m.record_id = record.id();
    m.config = config.erasure;
    m.dataset_digest = dataset_digest(dataset);
    if (!result.log.empty())
        m.final_loss = result.log.back().loss;
    m.steps = static_cast<int>(result.log.size());
    m.rng_digest = result.rng_digest;
    m.params_digest = result.params.digest();
    atomic_write(a.sidecar, to_json(m).dump(2) + "\n");
    return a;
}

EvalArtifacts evaluate_to_directory(const std::string& checkpoint, const CorefConceptDataset& dataset,
                                    const std::string& target, const RunConfig& config, const fs::path& out_dir,
                                    const std::string& method) {
    auto backend = make_backend(config.backend);
    ParamSet params;
    if (checkpoint == "pretrained") {
        params = backend->pretrained();
    } else {
        if (!fs::exists(checkpoint))
            throw MissingInputError("checkpoint not found: " + checkpoint);
        params = backend->load_checkpoint(checkpoint);
    }
    const auto& record = require_record(dataset, target);
    auto encoder = make_encoder(config.encoder);
    auto judge = make_judge(config.judge);
    BackendImageSource source(*backend, std::move(params), *encoder);

    EvalArtifacts a;
    a.result = evaluate_record(record, source, *judge, config.eval, method);
    fs::create_directories(out_dir);
    a.report_json = out_dir / "eval_report.json";
    a.report_markdown = out_dir / "eval_report.md";
    a.verdicts = out_dir / "verdicts.jsonl";
    atomic_write(a.report_json, to_json(a.result.report).dump(2) + "\n");
    atomic_write(a.report_markdown, compare_reports({a.result.report}).markdown);
    write_verdict_log(a.verdicts, a.result);
    return a;
}

SweepKind parse_sweep_kind(std::string_view s) {
    if (s == "mn_grid") return SweepKind::MnGrid;
    if (s == "certainty") return SweepKind::Certainty;
    throw ConfigError("sweep must be mn_grid or certainty, got '" + std::string(s) + "'");
}

std::string_view to_string(SweepKind k) noexcept { return k == SweepKind::MnGrid ? "mn_grid" : "certainty"; }

std::vector<SweepCell> sweep_cells(SweepKind kind, const ErasureConfig& base) {
    std::vector<SweepCell> cells;
    if (kind == SweepKind::MnGrid) {
        for (int m : kGridValues)
            for (int n : kGridValues) {
                SweepCell c{"M" + std::to_string(m) + "_N" + std::to_string(n), base, m, n};
                c.config.M = m;
                c.config.N = n;
                cells.push_back(std::move(c));
            }
        return cells;
    }
    SweepCell nocert{"nocert", base, base.M, base.N};
    nocert.config.certainty_mode = CertaintyMode::UniformOne;
    cells.push_back(nocert);
    const std::pair<const char*, NoiseSide> sides[] = {
        {"coref", NoiseSide::Coref}, {"retain", NoiseSide::Retain}, {"both", NoiseSide::Both}};
    for (const auto& [name, side] : sides) {
        for (double sigma : {0.0, 0.2, 0.4}) {
            // Both sides at zero noise is plain CRCE, so the table omits it.
            if (side == NoiseSide::Both && sigma == 0.0)
                continue;
            char label[32];
            std::snprintf(label, sizeof label, "%s-%g", name, sigma);
            SweepCell c{label, base, base.M, base.N};
            c.config.certainty_mode = CertaintyMode::Noise;
            c.config.noise_side = side;
            c.config.noise_sigma = sigma;
            cells.push_back(std::move(c));
        }
    }
    return cells;
}

int run_subprocess(const std::vector<std::string>& argv, const fs::path& log_file) {
    std::vector<char*> args;
    for (const auto& a : argv)
        args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);

    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log_file.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, args[0], &actions, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0)
        throw Error("cannot start " + argv.front() + ": " + std::strerror(rc));
    int status = 0;
    while (waitpid(pid, &status, 0) < 0)
        if (errno != EINTR)
            throw Error("waitpid failed for " + argv.front());
    if (WIFEXITED(status))
        return WEXITSTATUS(status);
    return 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
}

std::vector<CellOutcome> run_ablation(const AblationOptions& o, const RunConfig& config) {
    if (o.executable.empty() || !fs::exists(o.executable))
        throw ConfigError("ablation needs the path of the crce executable");
    if (!fs::exists(o.dataset))
        throw MissingInputError("dataset not found: " + o.dataset.string());
    const auto cells = sweep_cells(o.kind, config.erasure);
    std::vector<CellOutcome> outcomes(cells.size());
    fs::create_directories(o.out_dir / "cells");

    auto run_cell = [&](std::size_t i) {
        auto& out = outcomes[i];
        out.cell = cells[i];
        const fs::path dir = o.out_dir / "cells" / out.cell.name;
        fs::create_directories(dir);
        RunConfig cell_config = config;
        cell_config.erasure = out.cell.config;
        const fs::path cfg = dir / "config.json";
        atomic_write(cfg, to_json(cell_config).dump(2) + "\n");
        const fs::path log = dir / "cell.log";
        const std::string exe = fs::absolute(o.executable).string();
        const std::vector<std::string> train = {exe, "train", "--config", cfg.string(), "--dataset",
                                                o.dataset.string(), "--target", o.target, "--out", dir.string()};
        if (int rc = run_subprocess(train, log); rc != 0) {
            out.error = "train exited with " + std::to_string(rc) + " (see " + log.string() + ")";
            return;
        }
        const std::vector<std::string> eval = {exe,      "evaluate", "--config", cfg.string(),
                                               "--dataset", o.dataset.string(), "--target", o.target,
                                               "--checkpoint", (dir / "checkpoint.bin").string(),
                                               "--method", out.cell.name, "--out", dir.string()};
        if (int rc = run_subprocess(eval, log); rc != 0) {
            out.error = "evaluate exited with " + std::to_string(rc) + " (see " + log.string() + ")";
            return;
        }
        try {
            out.report = eval_report_from_json(json::parse(read_file(dir / "eval_report.json")));
        } catch (const std::exception& e) {
            out.error = std::string("unreadable report: ") + e.what();
        }
    };

    std::atomic<std::size_t> next{0};
    const int jobs = std::max(1, std::min<int>(o.jobs, static_cast<int>(cells.size())));
    std::vector<std::jthread> pool;
    for (int w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < cells.size(); i = next++)
                run_cell(i);
        });
    pool.clear();
    return outcomes;
}

Comparison merge_sweep(SweepKind kind, const std::vector<CellOutcome>& outcomes) {
    static const std::pair<EvalGroup, const char*> metrics[] = {{EvalGroup::Target, "Acc_U"},
                                                                {EvalGroup::CorefTrain, "Acc_C^train"},
                                                                {EvalGroup::CorefTest, "Acc_C^test"},
                                                                {EvalGroup::RetainTrain, "Acc_R^train"},
                                                                {EvalGroup::RetainTest, "Acc_R^test"}};
    std::ostringstream md, csv;
    csv << "cell,M,N,acc_u,acc_c_train,acc_c_test,acc_r_train,acc_r_test,status\n";
    for (const auto& o : outcomes) {
        csv << o.cell.name << "," << o.cell.config.M << "," << o.cell.config.N;
        for (const auto& [g, _] : metrics)
            csv << "," << (o.report ? format_percent(o.report->metric(g)) : "");
        csv << "," << (o.report ? "ok" : "failed") << "\n";
    }

    if (kind == SweepKind::MnGrid) {
        for (const auto& [g, title] : metrics) {
            md << "### " << title << "\n\n| M \\ N |";
            for (int n : kGridValues)
                md << " " << n << " |";
            md << "\n|---|---|---|---|---|\n";
            for (int m : kGridValues) {
                md << "| " << m << " |";
                for (int n : kGridValues) {
                    const CellOutcome* cell = nullptr;
                    for (const auto& o : outcomes)
                        if (o.cell.M == m && o.cell.N == n)
                            cell = &o;
                    md << " " << (!cell ? "-" : cell->report ? format_percent(cell->report->metric(g)) : "FAILED")
                       << " |";
                }
                md << "\n";
            }
            md << "\n";
        }
    } else {
        std::vector<EvalReport> ok;
        for (const auto& o : outcomes)
            if (o.report) {
                ok.push_back(*o.report);
                ok.back().method = "CRCE-" + o.cell.name;
            }
        if (!ok.empty())
            md << compare_reports(ok).markdown;
        for (const auto& o : outcomes)
            if (!o.report)
                md << "| CRCE-" << o.cell.name << " | FAILED | FAILED | FAILED | FAILED | FAILED |\n";
    }
    bool any_failed = false;
    for (const auto& o : outcomes)
        if (!o.report) {
            if (!any_failed)
                md << "\nFailed cells:\n";
            any_failed = true;
            md << "- " << o.cell.name << ": " << o.error << "\n";
        }
    return {md.str(), csv.str()};
}

} // namespace crce
