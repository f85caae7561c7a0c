#pragma once

#include "crce/chat_client.hpp"
#include "crce/error.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace crce {

struct GeneratedImage {
    std::string image_id;
    std::string prompt;
    std::uint64_t seed = 0;
    std::vector<std::uint8_t> png;
    /// Free-form generator metadata (the toy backend stores the sampled point as x, y).
    nlohmann::json metadata = nlohmann::json::object();
};

enum class Answer { Yes, No };

std::string_view to_string(Answer a) noexcept;

struct JudgeVerdict {
    Answer answer = Answer::No;
    std::string raw_text;
    std::string concept_name;
    std::string image_id;
};

/// A judge reply that contains no standalone yes/no token.
class AmbiguousVerdict : public Error {
public:
    explicit AmbiguousVerdict(std::string raw)
        : Error("AMBIGUOUS_VERDICT: " + raw.substr(0, 120)), raw_(std::move(raw)) {}
    const std::string& raw_text() const noexcept { return raw_; }

private:
    std::string raw_;
};

/// Judge instruction for `concept_name`; angle brackets and ampersands are escaped.
std::string build_judge_prompt(std::string_view concept_name);

/// Inverse of build_judge_prompt: the (unescaped) concept, or nullopt for other text.
std::optional<std::string> concept_from_judge_prompt(std::string_view prompt);

/// First standalone "yes"/"no" word, case-insensitive, punctuation stripped.
Answer parse_verdict(std::string_view raw);

/// (image, prompt) -> raw reply. Implementations must be callable from several threads.
class Judge {
public:
    virtual ~Judge() = default;
    virtual std::string id() const = 0;
    virtual std::string ask(const GeneratedImage& image, const std::string& prompt) = 0;
};

/// Rule-based judge for tests. Fixture JSON:
///   {"default": "no", "rules": [{"match": {"prompt": "...", "seed": 3, "concept": "..."}, "reply": "Yes."}]}
/// `match` keys are compared with the image metadata, plus "concept" (parsed from
/// the judge prompt), "prompt", "seed" and "image_id". First matching rule wins.
class MockJudge : public Judge {
public:
    using Rule = std::function<std::optional<std::string>(const GeneratedImage&, const std::string& concept_name)>;

    explicit MockJudge(std::string default_reply = "No.");
    static MockJudge from_fixture(const std::filesystem::path& path);
    static MockJudge from_json(const nlohmann::json& j);

    void add_rule(Rule rule);

    std::string id() const override { return "mock"; }
    std::string ask(const GeneratedImage& image, const std::string& prompt) override;
private:
    std::vector<Rule> rules_;
    std::string default_reply_;
};

/// Nearest-component classifier for the 2-D toy world. Says yes when the image's
/// point lies in the component the judged concept names.
class ToyJudge : public Judge {
public:
    std::string id() const override { return "toy-nearest-component"; }
    std::string ask(const GeneratedImage& image, const std::string& prompt) override;
};

/// Vision-language model behind an OpenAI-compatible chat endpoint; the image is
/// sent inline as a PNG data URL.
class RemoteVlmJudge : public Judge {
public:
    explicit RemoteVlmJudge(LlmClientConfig config);
    std::string id() const override { return "vlm:" + model_; }
    std::string ask(const GeneratedImage& image, const std::string& prompt) override;

private:
    std::string model_;
    HttpChatClient client_;
};

LlmClientConfig default_vlm_config();

struct JudgeConfig {
    /// "toy", "mock" or "remote".
    std::string kind = "toy";
    std::string fixtures;
    LlmClientConfig remote = default_vlm_config();
};

JudgeConfig judge_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const JudgeConfig& c);
std::unique_ptr<Judge> make_judge(const JudgeConfig& c);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

} // namespace crce
