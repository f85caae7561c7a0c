#pragma once

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace crce {

enum class Role { System, User, Assistant };

std::string_view role_name(Role r) noexcept;

struct ChatMessage {
    Role role = Role::User;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

nlohmann::json messages_to_json(const std::vector<ChatMessage>& messages);

/// Key used by fixture files: SHA-256 of the compact JSON of the message list.
std::string request_hash(const std::vector<ChatMessage>& messages);

/// Minimal chat contract. Implementations must be callable from several threads.
class ChatClient {
public:
    virtual ~ChatClient() = default;

    /// Sends the full transcript and returns the assistant's text.
    /// Throws TransportError on failure.
    virtual std::string send_chat(const std::vector<ChatMessage>& messages) = 0;

    virtual std::string model_name() const = 0;
};

/// Token bucket limiting requests per minute. Thread-safe.
class RateLimiter {
public:
    explicit RateLimiter(double requests_per_minute);

    /// Blocks until a token is available.
    void acquire();
    /// Takes a token if one is available now.
    bool try_acquire();

private:
    void refill_locked();

    std::mutex mutex_;
    double capacity_;
    double tokens_;
    double rate_per_s_;
    std::chrono::steady_clock::time_point last_;
};

/// Replays recorded responses keyed by request hash.
/// Fixture file: JSON array of {"request_hash", "response_text"}; an entry may
/// carry "error" instead of a response to simulate a transport failure.
class MockChatClient : public ChatClient {
public:
    MockChatClient() = default;
    explicit MockChatClient(const std::filesystem::path& fixture_file);

    void add_response(const std::string& request_hash, std::string response_text);
    void add_failure(const std::string& request_hash, std::string error);
    /// Used when no fixture matches; empty means "fail".
    void set_fallback(std::string response_text);

    std::string send_chat(const std::vector<ChatMessage>& messages) override;
    std::string model_name() const override { return "mock"; }

    std::size_t calls() const;
    const std::vector<std::string>& seen_hashes() const { return seen_; }

private:
    struct Fixture {
        std::string response;
        std::string error;
    };
    mutable std::mutex mutex_;
    std::map<std::string, Fixture> fixtures_;
    std::string fallback_;
    std::vector<std::string> seen_;
};

struct LlmClientConfig {
    std::string endpoint = "https://api.openai.com/v1";
    std::string model = "o1";
    std::string api_key_env = "OPENAI_API_KEY";
    double temperature = 0.0;
    int max_retries = 3;
    double requests_per_minute = 60.0;
    double timeout_s = 120.0;
    /// When set, a MockChatClient is built from this fixture file instead.
    std::string fixtures;
};

LlmClientConfig llm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LlmClientConfig& c);

/// OpenAI-compatible `/chat/completions` client.
class HttpChatClient : public ChatClient {
public:
    explicit HttpChatClient(LlmClientConfig config);

    std::string send_chat(const std::vector<ChatMessage>& messages) override;
    std::string model_name() const override { return config_.model; }

    /// Posts an already-built `messages` array (e.g. with image parts) and returns the reply text.
    std::string complete(const nlohmann::json& messages);

private:
    LlmClientConfig config_;
    RateLimiter limiter_;
};

std::unique_ptr<ChatClient> make_chat_client(const LlmClientConfig& config);

/// Splits "http(s)://host:port/base" into scheme+host and path prefix.
std::pair<std::string, std::string> split_url(const std::string& url);

} // namespace crce
