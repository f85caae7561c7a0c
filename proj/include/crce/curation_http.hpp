#pragma once

#include "crce/curation_service.hpp"

#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace crce {

struct CurationServerOptions {
    std::string host = "127.0.0.1";
    /// 0 binds an ephemeral port; see CurationServer::port().
    int port = 8765;
    /// The only origin granted CORS access.
    std::string ui_origin = "http://localhost:5173";
};

/// JSON API over a CurationService:
///   GET  /records[?state=&category=]      GET  /records/{id}
///   POST /records/{id}/edits              POST /records/{id}/regenerate
///   POST /records/{id}/approve
class CurationServer {
public:
    CurationServer(CurationService& service, CurationServerOptions options = {});
    ~CurationServer();

    /// Binds the socket; returns the bound port. Throws on failure.
    int bind();
    /// Serves until stop(). bind() is called first when needed.
    void listen();
    void stop();
    int port() const noexcept { return port_; }

private:
    void install_routes();

    CurationService& service_;
    CurationServerOptions options_;
    std::unique_ptr<httplib::Server> server_;
    int port_ = -1;
};

} // namespace crce
