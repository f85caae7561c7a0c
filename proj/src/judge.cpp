#include "crce/judge.hpp"

#include "crce/toy_world.hpp"
#include "crce/util.hpp"

#include <openssl/evp.h>

#include <cctype>

namespace crce {

using nlohmann::json;

namespace {

const std::string kLead = "Observe and describe the image and check whether it has the same concept as ";
const std::string kTail = ". Answer with a single word: yes or no.";

std::string escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string unescape(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.substr(i, 4) == "&lt;") {
            out += '<';
            i += 3;
        } else if (s.substr(i, 4) == "&gt;") {
            out += '>';
            i += 3;
        } else if (s.substr(i, 5) == "&amp;") {
            out += '&';
            i += 4;
        } else {
            out += s[i];
        }
    }
    return out;
}

bool json_matches(const json& want, const json& got) {
    if (want.is_number() && got.is_number())
        return want.get<double>() == got.get<double>();
    return want == got;
}

} // namespace

std::string_view to_string(Answer a) noexcept { return a == Answer::Yes ? "yes" : "no"; }

std::string build_judge_prompt(std::string_view concept_name) {
    if (trim(concept_name).empty())
        throw ValidationError("build_judge_prompt: concept must not be empty");
    return kLead + escape(concept_name) + kTail;
}

std::optional<std::string> concept_from_judge_prompt(std::string_view prompt) {
    if (prompt.substr(0, kLead.size()) != kLead)
        return std::nullopt;
    const auto end = prompt.rfind(kTail);
    if (end == std::string_view::npos || end < kLead.size())
        return std::nullopt;
    return unescape(prompt.substr(kLead.size(), end - kLead.size()));
}

Answer parse_verdict(std::string_view raw) {
    std::string word;
    auto flush = [&]() -> std::optional<Answer> {
        std::optional<Answer> a;
        if (word == "yes")
            a = Answer::Yes;
        else if (word == "no")
            a = Answer::No;
        word.clear();
        return a;
    };
    for (char c : raw) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            word += static_cast<char>(std::tolower(u));
        } else if (u == '\'') {
            // keep contractions such as "don't" in one word
            if (!word.empty())
                word += c;
        } else if (auto a = flush()) {
            return *a;
        }
    }
    if (auto a = flush())
        return *a;
    throw AmbiguousVerdict(std::string(raw));
}

MockJudge::MockJudge(std::string default_reply) : default_reply_(std::move(default_reply)) {}

void MockJudge::add_rule(Rule rule) { rules_.push_back(std::move(rule)); }

MockJudge MockJudge::from_json(const json& j) {
    MockJudge m(j.value("default", std::string("No.")));
    for (const auto& r : j.value("rules", json::array())) {
        const json match = r.value("match", json::object());
        const std::string reply = r.at("reply").get<std::string>();
        m.add_rule([match, reply](const GeneratedImage& img, const std::string& concept_name) -> std::optional<std::string> {
            for (const auto& [k, want] : match.items()) {
                json got;
                if (k == "concept")
                    got = concept_name;
                else if (k == "prompt")
                    got = img.prompt;
                else if (k == "seed")
                    got = img.seed;
                else if (k == "image_id")
                    got = img.image_id;
                else if (img.metadata.contains(k))
                    got = img.metadata[k];
                else
                    return std::nullopt;
                if (!json_matches(want, got))
                    return std::nullopt;
            }
            return reply;
        });
    }
    return m;
}

MockJudge MockJudge::from_fixture(const std::filesystem::path& path) {
    try {
        return from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
        throw ParseError(e.what(), path.string());
    }
}

std::string MockJudge::ask(const GeneratedImage& image, const std::string& prompt) {
    const std::string concept_name = concept_from_judge_prompt(prompt).value_or("");
    for (const auto& r : rules_)
        if (auto reply = r(image, concept_name))
            return *reply;
    return default_reply_;
}

std::string ToyJudge::ask(const GeneratedImage& image, const std::string& prompt) {
    const auto concept_name = concept_from_judge_prompt(prompt);
    if (!concept_name)
        return "I cannot tell what I am asked to check.";
    if (!image.metadata.contains("x") || !image.metadata.contains("y"))
        throw ValidationError("toy judge needs x/y metadata on image " + image.image_id);
    const Eigen::Vector2d p(image.metadata["x"].get<double>(), image.metadata["y"].get<double>());
    const auto seen = toy::classify_point(p);
    const auto wanted = toy::component_of(*concept_name);
    if (seen && wanted && *seen == *wanted)
        return "Yes, the image shows " + *concept_name + ".";
    return "No, the image does not show " + *concept_name + ".";
}

RemoteVlmJudge::RemoteVlmJudge(LlmClientConfig config) : model_(config.model), client_(std::move(config)) {}

std::string RemoteVlmJudge::ask(const GeneratedImage& image, const std::string& prompt) {
    json content = json::array();
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:image/png;base64," + base64_encode(image.png)}}}});
    content.push_back({{"type", "text"}, {"text", prompt}});
    json messages = json::array({{{"role", "user"}, {"content", content}}});
    return client_.complete(messages);
}

LlmClientConfig default_vlm_config() {
    LlmClientConfig c;
    c.endpoint = "http://localhost:8000/v1";
    c.model = "Qwen2-VL-7B-Instruct";
    c.api_key_env = "VLM_API_KEY";
    return c;
}

JudgeConfig judge_config_from_json(const json& j) {
    JudgeConfig c;
    c.kind = j.value("kind", c.kind);
    c.fixtures = j.value("fixtures", c.fixtures);
    if (j.contains("remote")) {
        json merged = to_json(c.remote);
        merged.update(j["remote"]);
        c.remote = llm_config_from_json(merged);
    }
    if (c.kind != "toy" && c.kind != "mock" && c.kind != "remote")
        throw ConfigError("judge kind must be toy, mock or remote, got '" + c.kind + "'");
    return c;
}

json to_json(const JudgeConfig& c) { return {{"kind", c.kind}, {"fixtures", c.fixtures}, {"remote", to_json(c.remote)}}; }

std::unique_ptr<Judge> make_judge(const JudgeConfig& c) {
    if (c.kind == "toy")
        return std::make_unique<ToyJudge>();
    if (c.kind == "mock") {
        if (c.fixtures.empty())
            return std::make_unique<MockJudge>();
        return std::make_unique<MockJudge>(MockJudge::from_fixture(c.fixtures));
    }
    if (c.kind == "remote")
        return std::make_unique<RemoteVlmJudge>(c.remote);
    throw ConfigError("unknown judge kind " + c.kind);
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

} // namespace crce
