#pragma once

#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mimic/codec.hpp"
#include "mimic/nn/specs.hpp"
#include "mimic/oracle.hpp"

namespace mimic {

struct HttpEndpoint {
  std::string host;
  int port = 0;
};

/// Accepts "http://host:port" (optionally with a trailing slash).
inline HttpEndpoint parse_http_url(const std::string& url) {
  const std::string scheme = "http://";
  if (url.rfind(scheme, 0) != 0)
    throw std::invalid_argument("oracle url must start with http://, got '" + url + "'");
  std::string rest = url.substr(scheme.size());
  if (!rest.empty() && rest.back() == '/') rest.pop_back();
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= rest.size())
    throw std::invalid_argument("oracle url needs host:port, got '" + url + "'");
  HttpEndpoint ep{rest.substr(0, colon), 0};
  try {
    ep.port = std::stoi(rest.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::invalid_argument("oracle url has a bad port: '" + url + "'");
  }
  if (ep.port < 1 || ep.port > 65535)
    throw std::invalid_argument("oracle url port out of range: '" + url + "'");
  return ep;
}

/// Serves a frozen victim over the wire protocol:
///   POST /v1/predict  {dtype, shape, data}  ->  {detections, remaining}
///   GET  /v1/budget                         ->  {allowed, consumed, remaining}
///   GET  /v1/info                           ->  {protocol, class_count, input, victim_id}
/// Budget is enforced server-side; malformed requests cost nothing.
class OracleServer {
 public:
  OracleServer(Detector<float>& victim, long long budget, const std::string& host, int port,
               std::string victim_id = "victim")
      : oracle_(victim, budget, std::move(victim_id)), host_(host) {
    svr_.set_read_timeout(300, 0);
    svr_.set_write_timeout(300, 0);

    svr_.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      Tensor<float> batch;
      try {
        const auto j = nlohmann::json::parse(req.body);
        batch = tensor_from_json<float>(j);
        const auto hwc = oracle_.info();
        if (batch.n() < 1 || batch.h() != hwc.height || batch.w() != hwc.width ||
            batch.c() != hwc.channels)
          throw std::invalid_argument("batch shape " + batch.shape_str() +
                                      " does not match victim input");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
        return;
      }
      try {
        auto dets = oracle_.query(batch);
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& d : dets) arr.push_back({{"probs", d.probs}, {"box", d.box}});
        const long long rem = oracle_.remaining();
        res.set_header("X-Remaining-Budget", std::to_string(rem));
        res.set_content(nlohmann::json{{"detections", arr}, {"remaining", rem}}.dump(),
                        "application/json");
      } catch (const BudgetExhausted& e) {
        res.status = 429;
        res.set_header("X-Remaining-Budget", std::to_string(e.remaining));
        res.set_content(nlohmann::json{{"error", "budget_exhausted"},
                                       {"remaining", e.remaining},
                                       {"requested", e.requested}}
                            .dump(),
                        "application/json");
      }
    });

    svr_.Get("/v1/budget", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(nlohmann::json{{"allowed", oracle_.budget().allowed()},
                                     {"consumed", oracle_.consumed()},
                                     {"remaining", oracle_.remaining()}}
                          .dump(),
                      "application/json");
    });

    svr_.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
      const auto i = oracle_.info();
      res.set_content(nlohmann::json{{"protocol", i.protocol},
                                     {"class_count", i.class_count},
                                     {"input",
                                      {{"height", i.height},
                                       {"width", i.width},
                                       {"channels", i.channels}}},
                                     {"victim_id", i.victim_id}}
                          .dump(),
                      "application/json");
    });

    if (port == 0) {
      port_ = svr_.bind_to_any_port(host);
      if (port_ < 0) throw std::runtime_error("cannot bind oracle server on " + host);
      th_ = std::thread([this] { svr_.listen_after_bind(); });
    } else {
      if (!svr_.bind_to_port(host, port))
        throw std::runtime_error("cannot bind oracle server on " + host + ":" +
                                 std::to_string(port));
      port_ = port;
      th_ = std::thread([this] { svr_.listen_after_bind(); });
    }
    svr_.wait_until_ready();
  }

  OracleServer(const OracleServer&) = delete;
  OracleServer& operator=(const OracleServer&) = delete;

  ~OracleServer() { stop(); }

  void stop() {
    if (th_.joinable()) {
      svr_.stop();
      th_.join();
    }
  }

  int port() const { return port_; }
  std::string url() const { return "http://" + host_ + ":" + std::to_string(port_); }
  InProcessOracle& oracle() { return oracle_; }

 private:
  InProcessOracle oracle_;
  std::string host_;
  httplib::Server svr_;
  std::thread th_;
  int port_ = 0;
};

/// Client side of the wire protocol; presents the same Oracle face as the
/// in-process handle.
class HttpOracle : public Oracle {
 public:
  explicit HttpOracle(const std::string& url) : ep_(parse_http_url(url)), cli_(ep_.host, ep_.port) {
    cli_.set_connection_timeout(5, 0);
    cli_.set_read_timeout(300, 0);
    cli_.set_write_timeout(300, 0);
    auto res = cli_.Get("/v1/info");
    if (!res) throw TransportError("cannot reach oracle at " + url);
    if (res->status != 200)
      throw TransportError("oracle info request failed with status " +
                           std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      info_.protocol = j.at("protocol").get<int>();
      info_.class_count = j.at("class_count").get<int>();
      info_.height = j.at("input").at("height").get<int>();
      info_.width = j.at("input").at("width").get<int>();
      info_.channels = j.at("input").at("channels").get<int>();
      info_.victim_id = j.value("victim_id", "");
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("oracle info response unreadable: ") + e.what());
    }
    if (info_.protocol != 1)
      throw TransportError("protocol-version mismatch: server speaks v" +
                           std::to_string(info_.protocol) + ", client speaks v1");
  }

  std::vector<Detection> query(const Tensor<float>& batch) override {
    const std::string body = tensor_to_json(batch).dump();
    httplib::Result res = [&] {
      std::lock_guard<std::mutex> lock(mu_);
      return cli_.Post("/v1/predict", body, "application/json");
    }();
    if (!res)
      throw TransportError("oracle connection failed: " + httplib::to_string(res.error()));
    if (res->status == 429) {
      long long rem = 0;
      try {
        rem = nlohmann::json::parse(res->body).value("remaining", 0LL);
      } catch (const nlohmann::json::exception&) {
      }
      throw BudgetExhausted(rem, batch.n());
    }
    if (res->status != 200)
      throw TransportError("oracle answered status " + std::to_string(res->status) + ": " +
                           res->body);
    try {
      const auto j = nlohmann::json::parse(res->body);
      std::vector<Detection> out;
      for (const auto& e : j.at("detections")) {
        Detection d;
        d.probs = e.at("probs").get<std::vector<double>>();
        const auto bx = e.at("box").get<std::vector<double>>();
        if (bx.size() != 4) throw std::runtime_error("box must have 4 coordinates");
        for (int k = 0; k < 4; ++k) d.box[k] = bx[k];
        out.push_back(std::move(d));
      }
      if (static_cast<int>(out.size()) != batch.n())
        throw std::runtime_error("expected " + std::to_string(batch.n()) + " detections, got " +
                                 std::to_string(out.size()));
      return out;
    } catch (const std::exception& e) {
      throw TransportError(std::string("oracle predict response unreadable: ") + e.what());
    }
  }

  long long remaining() const override {
    httplib::Result res = [&] {
      std::lock_guard<std::mutex> lock(mu_);
      return cli_.Get("/v1/budget");
    }();
    if (!res || res->status != 200) throw TransportError("oracle budget request failed");
    try {
      return nlohmann::json::parse(res->body).at("remaining").get<long long>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("oracle budget response unreadable: ") + e.what());
    }
  }

  OracleInfo info() const override { return info_; }

 private:
  HttpEndpoint ep_;
  mutable httplib::Client cli_;
  mutable std::mutex mu_;
  OracleInfo info_;
};

}  // namespace mimic
