#include "crce/curation_http.hpp"

#include <httplib.h>
#include <json.hpp>

namespace crce {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

ordered_json error_body(const std::string& code, const std::string& message) {
    ordered_json j;
    j["error"] = {{"code", code}, {"message", message}};
    return j;
}

ordered_json violations_json(const std::vector<Violation>& vs) {
    ordered_json a = ordered_json::array();
    for (const auto& v : vs)
        a.emplace_back(to_json(v));
    return a;
}

ordered_json record_body(const ConceptRecord& r, const std::vector<Violation>& violations) {
    ordered_json j;
    j["id"] = r.id();
    j["record"] = record_to_json(r);
    j["violations"] = violations_json(violations);
    return j;
}

int status_for(const std::string& code) {
    if (code == "NOT_FOUND") return 404;
    if (code == "REVISION_CONFLICT") return 409;
    if (code == "APPROVAL_BLOCKED") return 422;
    return 400;
}

/// Maps exceptions onto JSON error responses; every handler runs through here.
template <typename F>
void guarded(httplib::Response& res, F&& body) {
    try {
        body();
    } catch (const CurationError& e) {
        auto j = error_body(e.code(), e.what());
        if (e.current_revision() >= 0)
            j["error"]["current_revision"] = e.current_revision();
        if (!e.violations().empty())
            j["error"]["violations"] = violations_json(e.violations());
        send_json(res, status_for(e.code()), j);
    } catch (const TransportError& e) {
        auto j = error_body("LLM_FAILURE", e.what());
        j["error"]["attempts"] = e.attempts();
        j["error"]["retry_after_s"] = e.retry_after_seconds();
        send_json(res, 502, j);
    } catch (const ConfigError& e) {
        send_json(res, 503, error_body("NOT_CONFIGURED", e.what()));
    } catch (const json::exception& e) {
        send_json(res, 400, error_body("BAD_REQUEST", e.what()));
    } catch (const Error& e) {
        send_json(res, 400, error_body("BAD_REQUEST", e.what()));
    } catch (const std::exception& e) {
        send_json(res, 500, error_body("INTERNAL", e.what()));
    }
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty())
        return json::object();
    return json::parse(req.body);
}

} // namespace

CurationServer::CurationServer(CurationService& service, CurationServerOptions options)
    : service_(service), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
    install_routes();
}

CurationServer::~CurationServer() { stop(); }

void CurationServer::install_routes() {
    auto& s = *server_;
    const std::string origin = options_.ui_origin;

    s.set_post_routing_handler([origin](const httplib::Request& req, httplib::Response& res) {
        if (req.get_header_value("Origin") == origin) {
            res.set_header("Access-Control-Allow-Origin", origin);
            res.set_header("Vary", "Origin");
        }
    });
    s.Options(R"(/records.*)", [origin](const httplib::Request& req, httplib::Response& res) {
        if (req.get_header_value("Origin") != origin) {
            res.status = 403;
            return;
        }
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    s.Get("/records", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            RecordFilter f;
            if (req.has_param("state"))
                f.state = parse_state(req.get_param_value("state"));
            if (req.has_param("category"))
                f.category = parse_category(req.get_param_value("category"));
            ordered_json a = ordered_json::array();
            for (const auto& r : service_.list_records(f))
                a.push_back(to_json(r));
            send_json(res, 200, ordered_json{{"records", a}});
        });
    });

    s.Get(R"(/records/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto record = service_.get_record(req.matches[1]);
            auto violations = validate_record(record);
            send_json(res, 200, record_body(record, violations));
        });
    });

    // Body is one EditCommand or {"edits": [...]}; edits apply in order and stop at the first rejection.
    s.Post(R"(/records/([^/]+)/edits)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            const json body = parse_body(req);
            std::vector<EditCommand> cmds;
            if (body.contains("edits")) {
                for (const auto& e : body.at("edits"))
                    cmds.push_back(edit_command_from_json(e, id));
            } else {
                cmds.push_back(edit_command_from_json(body, id));
            }
            EditResult result;
            for (auto& c : cmds) {
                if (c.record != id)
                    throw CurationError("INVALID_PATH", "edit targets '" + c.record + "' but was posted to '" + id + "'");
                result = service_.apply_edit(c);
            }
            if (cmds.empty())
                throw ValidationError("no edits given");
            send_json(res, 200, record_body(result.record, result.violations));
        });
    });

    s.Post(R"(/records/([^/]+)/approve)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json body = parse_body(req);
            EditCommand c;
            c.record = req.matches[1];
            c.op = EditOp::ApproveRecord;
            c.base_revision = body.at("base_revision").get<std::int64_t>();
            auto result = service_.apply_edit(c);
            send_json(res, 200, record_body(result.record, result.violations));
        });
    });

    s.Post(R"(/records/([^/]+)/regenerate)", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const json body = parse_body(req);
            auto diff = service_.request_regeneration(req.matches[1], body.at("feedback").get<std::string>());
            auto j = to_json(diff);
            ordered_json all = ordered_json::array();
            std::vector<std::size_t> every(diff.changes.size());
            for (std::size_t i = 0; i < every.size(); ++i)
                every[i] = i;
            for (const auto& c : diff_to_edit_commands(diff, every))
                all.push_back(to_json(c));
            j["apply_all"] = std::move(all);
            send_json(res, 200, j);
        });
    });
}

int CurationServer::bind() {
    if (port_ > 0)
        return port_;
    if (options_.port == 0)
        port_ = server_->bind_to_any_port(options_.host);
    else
        port_ = server_->bind_to_port(options_.host, options_.port) ? options_.port : -1;
    if (port_ <= 0)
        throw Error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
    return port_;
}

void CurationServer::listen() {
    bind();
    server_->listen_after_bind();
}

void CurationServer::stop() {
    if (server_)
        server_->stop();
}

} // namespace crce
