#pragma once

// cpp-httplib routes for SessionService.

#include <string>

// Eigen must precede httplib.h: <resolv.h> defines a `_res` macro that
// breaks Eigen's product kernels.
#include "fewshot/session.hpp"

#include <httplib.h>

namespace fewshot {

inline void send(httplib::Response& res, const HandlerResult& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

/// Installs the session API and CORS headers for `allowed_origin`.
inline void install_routes(httplib::Server& server, SessionService& service, const std::string& allowed_origin = "*") {
  server.set_default_headers({{"Access-Control-Allow-Origin", allowed_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send(res, SessionService::healthz()); });
  server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.create(req.body));
  });
  server.Get(R"(/sessions/([^/]+)/view)", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.view(req.matches[1]));
  });
  server.Post(R"(/sessions/([^/]+)/labels)", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.submit(req.matches[1], req.body));
  });
}

}  // namespace fewshot
