#pragma once

// HTTP front end for TwinService. Requires cpp-httplib on the include path.

#include <string>

#include <httplib.h>

#include "service.hpp"

namespace airtwin::service {

struct HttpConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string cors_origin = "*";
};

/// Registers every endpoint of `svc` on `server`. The service must outlive it.
inline void mount(httplib::Server& server, TwinService& svc, const HttpConfig& cfg) {
    const std::string origin = cfg.cors_origin;
    server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    auto forward = [&svc](const httplib::Request& req, httplib::Response& res) {
        ApiRequest api{req.method, req.path, {}, req.body};
        for (const auto& [k, v] : req.params) api.query.emplace(k, v);
        const auto out = svc.handle(api);
        res.status = out.status;
        res.set_content(out.body, out.content_type);
    };
    server.Get(R"(/api/.*)", forward);
    server.Post(R"(/api/.*)", forward);
    server.Put(R"(/api/.*)", forward);
}

}  // namespace airtwin::service
