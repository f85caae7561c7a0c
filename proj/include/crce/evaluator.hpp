#pragma once

#include "crce/backend.hpp"
#include "crce/dataset.hpp"
#include "crce/judge.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace crce {

enum class EvalGroup { Target, CorefTrain, CorefTest, RetainTrain, RetainTest };

inline constexpr std::array<EvalGroup, 5> kAllGroups = {EvalGroup::Target, EvalGroup::CorefTrain, EvalGroup::CorefTest,
                                                        EvalGroup::RetainTrain, EvalGroup::RetainTest};

std::string_view to_string(EvalGroup g) noexcept;
/// Target and coref groups measure erasure; retain groups measure preservation.
bool is_erasure_group(EvalGroup g) noexcept;

/// What happens to replies that stay ambiguous after one retry.
enum class AmbiguousPolicy {
    /// Count against the method: "yes" for erasure groups, "no" for retain groups.
    Conservative,
    /// Leave them out of the accuracy denominators.
    Exclude,
};

struct EvalOptions {
    int n_images = 10;
    /// Defaults to 0..n_images-1 when empty.
    std::vector<std::uint64_t> seeds;
    int workers = 1;
    AmbiguousPolicy ambiguous = AmbiguousPolicy::Conservative;
    /// Judge coref images against the original target (default) or against the coref text itself.
    bool corefs_against_target = true;

    std::vector<std::uint64_t> effective_seeds() const;
};

/// Produces images for (prompt, seed). Must be callable from several threads.
class ImageSource {
public:
    virtual ~ImageSource() = default;
    virtual GeneratedImage generate(const std::string& prompt, std::uint64_t seed) = 0;
};

/// Samples a DiffusionBackend at fixed parameters and renders the result.
/// With `cache_dir` set, PNGs are written to {cache_dir}/{prompt_hash}/{seed}.png.
class BackendImageSource : public ImageSource {
public:
    BackendImageSource(const DiffusionBackend& backend, ParamSet params, TextEncoder& encoder,
                       std::optional<std::filesystem::path> cache_dir = std::nullopt);

    GeneratedImage generate(const std::string& prompt, std::uint64_t seed) override;

private:
    const Conditioning& conditioning(const std::string& prompt);

    const DiffusionBackend& backend_;
    ParamSet params_;
    TextEncoder& encoder_;
    std::optional<std::filesystem::path> cache_dir_;
    std::mutex mutex_;
    std::map<std::string, Conditioning> conds_;
};

std::string prompt_hash(std::string_view prompt);

struct VerdictRecord {
    EvalGroup group = EvalGroup::Target;
    std::string prompt;
    std::string concept_name;
    std::string image_id;
    std::uint64_t seed = 0;
    std::string raw_text;
    std::optional<Answer> answer;
    bool ambiguous = false;
    /// Set when the judged answer came from the ambiguity policy rather than the reply.
    bool imputed = false;
    std::string error;
};

nlohmann::ordered_json to_json(const VerdictRecord& v);

/// Yes count over judged pairs for one prompt.
struct PromptTally {
    std::string prompt;
    int yes = 0;
    int judged = 0;
    int ambiguous = 0;
    int failed = 0;

    double rate() const { return judged == 0 ? 0.0 : static_cast<double>(yes) / judged; }
};

struct GroupResult {
    std::vector<PromptTally> prompts;
    std::vector<VerdictRecord> verdicts;

    int yes() const;
    int judged() const;
    int failed() const;
    int ambiguous() const;
    /// yes / judged over every (prompt, image) pair of the group.
    double yes_rate() const;
    bool partial() const { return failed() > 0; }
};

/// Generates n_images per prompt and asks `judge` whether each shows `criteria[i]`.
/// Generation and judge failures are recorded per pair and flagged, never dropped.
GroupResult evaluate_prompt_group(ImageSource& source, const std::vector<std::string>& prompts,
                                  const std::vector<std::string>& criteria, Judge& judge, EvalGroup group,
                                  const EvalOptions& options);

struct EvalReport {
    std::string target;
    std::string method;
    double acc_u = 0;
    double acc_c_train = 0;
    double acc_c_test = 0;
    double acc_r_train = 0;
    double acc_r_test = 0;
    int n_images_per_prompt = 0;
    std::vector<std::uint64_t> seeds;
    int ambiguous = 0;
    int failed = 0;
    bool partial = false;

    double metric(EvalGroup g) const;
};

nlohmann::ordered_json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
/// One markdown table row, accuracies as percentages with two decimals.
std::string render_markdown(const EvalReport& r);

/// Group accuracy = arithmetic mean of its per-prompt yes-rates.
EvalReport compute_report(const ConceptRecord& record, const std::map<EvalGroup, std::vector<double>>& rates_by_group);
/// Group accuracy = pooled yes count / pooled judged count.
EvalReport compute_report(const ConceptRecord& record, const std::map<EvalGroup, GroupResult>& results);

struct Comparison {
    std::string markdown;
    std::string csv;
};

/// Table-1 style comparison; the best value of each column is bolded (lowest for
/// erasure metrics, highest for retain metrics).
Comparison compare_reports(const std::vector<EvalReport>& reports);

struct EvaluationResult {
    EvalReport report;
    std::map<EvalGroup, GroupResult> groups;
};

/// Runs all five groups for a record.
EvaluationResult evaluate_record(const ConceptRecord& record, ImageSource& source, Judge& judge,
                                 const EvalOptions& options, std::string method = "crce");

/// Writes the verdict log as JSON lines.
void write_verdict_log(const std::filesystem::path& path, const EvaluationResult& result);

std::string format_percent(double rate);

} // namespace crce
