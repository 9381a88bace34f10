#pragma once

// Entailment oracle backed by an HTTP judge service.
//
//   POST <path>  {"premise": str, "hypothesis": str}  ->  {"entails": bool}
//
// A fresh client is created per call, so one oracle may be shared across threads.

#include <string>
#include <utility>

#include "httplib.h"
#include "json.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/uncertainty.hpp"

namespace tokenmil {

class HttpEntailmentOracle final : public EntailmentOracle {
 public:
  HttpEntailmentOracle(std::string host, int port, std::string path = "/entails",
                       int timeout_seconds = 30)
      : host_(std::move(host)), port_(port), path_(std::move(path)), timeout_(timeout_seconds) {}

  bool entails(const std::string& premise, const std::string& hypothesis) const override {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(timeout_, 0);
    client.set_read_timeout(timeout_, 0);
    const nlohmann::json body = {{"premise", premise}, {"hypothesis", hypothesis}};
    auto res = client.Post(path_, body.dump(), "application/json");
    if (!res) {
      throw ServiceError("entailment service " + host_ + ":" + std::to_string(port_) +
                         " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw ServiceError("entailment service returned HTTP " + std::to_string(res->status));
    }
    try {
      return nlohmann::json::parse(res->body).at("entails").get<bool>();
    } catch (const nlohmann::json::exception& ex) {
      throw ServiceError(std::string("entailment service sent a malformed reply: ") + ex.what());
    }
  }

 private:
  std::string host_;
  int port_;
  std::string path_;
  int timeout_;
};

}  // namespace tokenmil
