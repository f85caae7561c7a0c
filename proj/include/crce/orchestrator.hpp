#pragma once

#include "crce/backend.hpp"
#include "crce/chat_client.hpp"
#include "crce/curation_http.hpp"
#include "crce/dataset.hpp"
#include "crce/evaluator.hpp"
#include "crce/judge.hpp"
#include "crce/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace crce {

struct BackendSpec {
    /// Only "toy" ships; other backends plug in through DiffusionBackend.
    std::string kind = "toy";
    /// Pretrained weights; empty means the shipped default.
    std::string weights;
};

struct EncoderSpec {
    /// "toy" or "clip".
    std::string kind = "toy";
    /// CLIP checkpoint directory; empty means discovery via $CRCE_CLIP_MODEL_DIR.
    std::string model_dir;
    std::string pooling = "eos";
};

/// Everything a command may need. Serialised as the config file format.
struct RunConfig {
    ErasureConfig erasure;
    LlmClientConfig llm;
    JudgeConfig judge;
    BackendSpec backend;
    EncoderSpec encoder;
    EvalOptions eval;
    CurationServerOptions curation;
};

nlohmann::ordered_json to_json(const RunConfig& c);
/// Keys absent from `j` keep their value in `base`; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
/// Defaults (optionally the toy preset) overlaid with a config file.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, bool toy_preset = false);
std::string config_digest(const RunConfig& c);

std::unique_ptr<DiffusionBackend> make_backend(const BackendSpec& spec);
std::shared_ptr<TextEncoder> make_encoder(const EncoderSpec& spec);

/// A required input file is absent (CLI exit code 2).
class MissingInputError : public Error {
public:
    using Error::Error;
};

struct RunManifest {
    std::string run_id;
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config;
    std::string config_digest;
    std::string dataset_digest;
    std::string started;
    std::string finished;
    std::string status = "ok";
    /// name -> path; digests are added when the manifest is written.
    std::map<std::string, std::filesystem::path> artifacts;
};

/// Reserves a fresh run id under `{out_root}/manifests`.
RunManifest begin_run(const std::filesystem::path& out_root, std::string command, const RunConfig& config,
                      std::vector<std::string> argv = {});
/// Writes the manifest once; an existing file with the same id is never replaced.
std::filesystem::path write_manifest(const std::filesystem::path& out_root, RunManifest& manifest);

// ---- generate ----

struct GenerateFailure {
    std::string target;
    std::string error;
    int attempts = 1;
};

struct GenerateResult {
    CorefConceptDataset dataset;
    std::vector<GenerateFailure> failures;
    /// Pool violations per record id.
    std::map<std::string, std::vector<Violation>> violations;
};

/// One draft record per target and sense. Failures are isolated per target.
GenerateResult generate_dataset(const std::vector<std::string>& targets, Category category, ChatClient& client,
                                std::uint64_t seed);
std::vector<std::string> read_targets_file(const std::filesystem::path& path);

// ---- train / evaluate ----

/// Sidecar written next to every checkpoint (same stem, ".json").
struct CheckpointManifest {
    std::string backend;
    std::string target;
    std::string record_id;
    ErasureConfig config;
    std::string dataset_digest;
    std::optional<LossBreakdown> final_loss;
    int steps = 0;
    std::string rng_digest;
    std::string params_digest;
};

nlohmann::ordered_json to_json(const CheckpointManifest& m);
CheckpointManifest checkpoint_manifest_from_json(const nlohmann::json& j);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

struct TrainArtifacts {
    std::filesystem::path checkpoint;
    std::filesystem::path sidecar;
    std::filesystem::path log;
    CheckpointManifest manifest;
};

/// Trains on `target` from `dataset` and writes checkpoint.bin, checkpoint.json and train_log.jsonl into `out_dir`.
TrainArtifacts train_to_directory(const CorefConceptDataset& dataset, const std::string& target,
                                  const RunConfig& config, const std::filesystem::path& out_dir);

struct EvalArtifacts {
    EvaluationResult result;
    std::filesystem::path report_json;
    std::filesystem::path report_markdown;
    std::filesystem::path verdicts;
};

/// `checkpoint` may be the literal "pretrained" for the unerased model.
EvalArtifacts evaluate_to_directory(const std::string& checkpoint, const CorefConceptDataset& dataset,
                                    const std::string& target, const RunConfig& config,
                                    const std::filesystem::path& out_dir, const std::string& method);

// ---- ablate ----

enum class SweepKind { MnGrid, Certainty };

SweepKind parse_sweep_kind(std::string_view s);
std::string_view to_string(SweepKind k) noexcept;

struct SweepCell {
    std::string name;
    ErasureConfig config;
    /// Grid coordinates for mn_grid cells.
    int M = 0;
    int N = 0;
};

inline constexpr std::array<int, 4> kGridValues = {1, 3, 5, 10};

std::vector<SweepCell> sweep_cells(SweepKind kind, const ErasureConfig& base);

struct CellOutcome {
    SweepCell cell;
    std::optional<EvalReport> report;
    std::string error;
};

struct AblationOptions {
    std::filesystem::path dataset;
    std::string target;
    SweepKind kind = SweepKind::MnGrid;
    std::filesystem::path out_dir;
    int jobs = 1;
    /// Program invoked for each cell's train and evaluate steps.
    std::filesystem::path executable;
};

/// Runs every cell as `train` then `evaluate` subprocesses, at most `jobs` at a time.
/// Cells that fail are reported, not retried.
std::vector<CellOutcome> run_ablation(const AblationOptions& options, const RunConfig& config);

/// Per-metric M x N tables (mn_grid) or one row per variant (certainty).
Comparison merge_sweep(SweepKind kind, const std::vector<CellOutcome>& outcomes);

/// Exit code of a child process run with `argv`; output goes to `log_file`.
int run_subprocess(const std::vector<std::string>& argv, const std::filesystem::path& log_file);

} // namespace crce
