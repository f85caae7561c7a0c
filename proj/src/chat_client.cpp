#include "crce/chat_client.hpp"

#include "crce/error.hpp"
#include "crce/util.hpp"

#include <httplib.h>

#include <cstdlib>
#include <thread>

namespace crce {

using nlohmann::json;

std::string_view role_name(Role r) noexcept {
    switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    }
    return "";
}

json messages_to_json(const std::vector<ChatMessage>& messages) {
    json arr = json::array();
    for (const auto& m : messages)
        arr.push_back(json{{"role", role_name(m.role)}, {"content", m.content}});
    return arr;
}

std::string request_hash(const std::vector<ChatMessage>& messages) {
    return sha256_hex(messages_to_json(messages).dump());
}

// ------------------------------------------------------------ RateLimiter

RateLimiter::RateLimiter(double requests_per_minute)
    : capacity_(std::max(1.0, requests_per_minute / 60.0 * 5.0)),
      tokens_(capacity_),
      rate_per_s_(requests_per_minute / 60.0),
      last_(std::chrono::steady_clock::now()) {
    if (requests_per_minute <= 0.0)
        throw ConfigError("requests_per_minute must be positive");
}

void RateLimiter::refill_locked() {
    auto now = std::chrono::steady_clock::now();
    double dt = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    tokens_ = std::min(capacity_, tokens_ + dt * rate_per_s_);
}

bool RateLimiter::try_acquire() {
    std::lock_guard lock(mutex_);
    refill_locked();
    if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return true;
    }
    return false;
}

void RateLimiter::acquire() {
    for (;;) {
        double wait_s;
        {
            std::lock_guard lock(mutex_);
            refill_locked();
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            wait_s = (1.0 - tokens_) / rate_per_s_;
        }
        std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
    }
}

// ------------------------------------------------------------ Mock

MockChatClient::MockChatClient(const std::filesystem::path& fixture_file) {
    json j;
    try {
        j = json::parse(read_file(fixture_file));
    } catch (const json::parse_error& e) {
        throw ParseError(e.what(), fixture_file.string());
    }
    if (!j.is_array())
        throw ParseError("fixture file must hold a JSON array", fixture_file.string());
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& f = j[i];
        auto where = fixture_file.string() + "[" + std::to_string(i) + "]";
        if (!f.contains("request_hash"))
            throw ParseError("missing request_hash", where);
        auto hash = f["request_hash"].get<std::string>();
        if (f.contains("response_text"))
            add_response(hash, f["response_text"].get<std::string>());
        else if (f.contains("error"))
            add_failure(hash, f["error"].get<std::string>());
        else
            throw ParseError("entry needs response_text or error", where);
    }
}

void MockChatClient::add_response(const std::string& hash, std::string response_text) {
    std::lock_guard lock(mutex_);
    fixtures_[hash] = Fixture{std::move(response_text), {}};
}

void MockChatClient::add_failure(const std::string& hash, std::string error) {
    std::lock_guard lock(mutex_);
    fixtures_[hash] = Fixture{{}, std::move(error)};
}

void MockChatClient::set_fallback(std::string response_text) {
    std::lock_guard lock(mutex_);
    fallback_ = std::move(response_text);
}

std::size_t MockChatClient::calls() const {
    std::lock_guard lock(mutex_);
    return seen_.size();
}

std::string MockChatClient::send_chat(const std::vector<ChatMessage>& messages) {
    auto hash = request_hash(messages);
    std::lock_guard lock(mutex_);
    seen_.push_back(hash);
    auto it = fixtures_.find(hash);
    if (it == fixtures_.end()) {
        if (!fallback_.empty())
            return fallback_;
        throw TransportError("mock client has no fixture for request " + hash);
    }
    if (!it->second.error.empty())
        throw TransportError("mock transport failure: " + it->second.error);
    return it->second.response;
}

// ------------------------------------------------------------ HTTP

LlmClientConfig llm_config_from_json(const json& j) {
    LlmClientConfig c;
    c.endpoint = j.value("endpoint", c.endpoint);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.temperature = j.value("temperature", c.temperature);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.requests_per_minute = j.value("requests_per_minute", c.requests_per_minute);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.fixtures = j.value("fixtures", c.fixtures);
    return c;
}

json to_json(const LlmClientConfig& c) {
    return json{{"endpoint", c.endpoint},       {"model", c.model},
                {"api_key_env", c.api_key_env}, {"temperature", c.temperature},
                {"max_retries", c.max_retries}, {"requests_per_minute", c.requests_per_minute},
                {"timeout_s", c.timeout_s},     {"fixtures", c.fixtures}};
}

std::pair<std::string, std::string> split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw ConfigError("endpoint must start with http:// or https://: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos)
        return {url, ""};
    auto base = url.substr(path_start);
    while (!base.empty() && base.back() == '/')
        base.pop_back();
    return {url.substr(0, path_start), base};
}

HttpChatClient::HttpChatClient(LlmClientConfig config)
    : config_(std::move(config)), limiter_(config_.requests_per_minute) {}

std::string HttpChatClient::send_chat(const std::vector<ChatMessage>& messages) {
    return complete(messages_to_json(messages));
}

std::string HttpChatClient::complete(const json& messages) {
    auto [host, base] = split_url(config_.endpoint);
    httplib::Client cli(host);
    auto secs = static_cast<time_t>(config_.timeout_s);
    cli.set_read_timeout(secs, 0);
    cli.set_write_timeout(secs, 0);
    cli.set_connection_timeout(10, 0);

    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
        if (const char* key = std::getenv(config_.api_key_env.c_str()))
            headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    json body{{"model", config_.model}, {"temperature", config_.temperature}, {"messages", messages}};
    const auto payload = body.dump();

    std::string last_error;
    double retry_after = 0.0;
    const int attempts = std::max(1, config_.max_retries + 1);
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        limiter_.acquire();
        auto res = cli.Post(base + "/chat/completions", headers, payload, "application/json");
        if (!res) {
            last_error = "request failed: " + httplib::to_string(res.error());
        } else if (res->status == 200) {
            try {
                auto j = json::parse(res->body);
                return j.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const std::exception& e) {
                throw TransportError(std::string("malformed completion payload: ") + e.what(), attempt);
            }
        } else {
            last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
            if (res->has_header("Retry-After"))
                retry_after = std::atof(res->get_header_value("Retry-After").c_str());
            if (res->status < 500 && res->status != 429)
                throw TransportError(last_error, attempt, retry_after);
        }
        if (attempt < attempts) {
            double backoff = retry_after > 0.0 ? retry_after : 0.25 * (1 << (attempt - 1));
            std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
        }
    }
    throw TransportError(last_error, attempts, retry_after);
}

std::unique_ptr<ChatClient> make_chat_client(const LlmClientConfig& config) {
    if (!config.fixtures.empty())
        return std::make_unique<MockChatClient>(config.fixtures);
    return std::make_unique<HttpChatClient>(config);
}

} // namespace crce
