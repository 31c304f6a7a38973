#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>
#include <mimic/codec.hpp>
#include <mimic/nn/specs.hpp>
#include <mimic/oracle.hpp>
#include <mimic/oracle_http.hpp>
#include <mimic/rng.hpp>

using namespace mimic;

namespace {

NetworkSpec victim_spec() {
  NetworkSpec s;
  s.role = "victim";
  s.name = "oracle-test-victim";
  s.class_count = 3;
  s.input_side = 8;
  s.input_channels = 3;
  s.layers = {LayerSpec{"conv", {{"out", 4}, {"k", 3}, {"s", 2}, {"p", 1}}},
              LayerSpec{"relu", {}},
              LayerSpec{"dense", {{"units", 8}}},
              LayerSpec{"relu", {}}};
  return s;
}

Tensor<float> batch_of(int n, std::uint64_t seed = 11) {
  Tensor<float> x(n, 8, 8, 3);
  Rng rng(seed);
  rng.fill_uniform(std::span<float>(x.v), 0, 1);
  return x;
}

}  // namespace

TEST(Budget, ConsumeArithmetic) {
  QueryBudget b(1000);
  EXPECT_EQ(b.allowed(), 1000);
  EXPECT_TRUE(b.try_consume(256));
  EXPECT_EQ(b.remaining(), 744);
  EXPECT_EQ(b.consumed(), 256);
  EXPECT_THROW(QueryBudget(-1), std::invalid_argument);
}

TEST(Budget, RejectionIsAtomicAndComplete) {
  QueryBudget b(1000);
  ASSERT_TRUE(b.try_consume(900));
  EXPECT_FALSE(b.try_consume(256));  // 100 left: all-or-nothing
  EXPECT_EQ(b.remaining(), 100);
  EXPECT_EQ(b.consumed(), 900);
  EXPECT_FALSE(b.try_consume(-1));
  EXPECT_TRUE(b.try_consume(100));
  EXPECT_EQ(b.remaining(), 0);
  EXPECT_FALSE(b.try_consume(1));
  EXPECT_TRUE(b.try_consume(0));
}

TEST(Budget, RestoreConsumedBoundsChecked) {
  QueryBudget b(500);
  b.restore_consumed(123);
  EXPECT_EQ(b.consumed(), 123);
  EXPECT_EQ(b.remaining(), 377);
  EXPECT_THROW(b.restore_consumed(501), std::invalid_argument);
  EXPECT_THROW(b.restore_consumed(-1), std::invalid_argument);
}

TEST(Budget, ParallelConsumersNeverOverdraw) {
  QueryBudget b(1000);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&b] {
      while (b.try_consume(7)) {
      }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(b.consumed() + b.remaining(), 1000);
  EXPECT_EQ(b.consumed(), 994);  // 142 * 7; the last 6 can never be claimed
}

TEST(InProcess, ChargesPerImageAndAnswersDeterministically) {
  auto victim = build_detector<float>(victim_spec(), 21);
  InProcessOracle oracle(victim, 1000);
  auto x = batch_of(256);
  auto first = oracle.query(x);
  EXPECT_EQ(first.size(), 256u);
  EXPECT_EQ(oracle.remaining(), 744);
  auto second = oracle.query(x);
  EXPECT_EQ(oracle.remaining(), 488);
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].probs, second[i].probs);
    EXPECT_EQ(first[i].box, second[i].box);
  }
}

TEST(InProcess, OverdrawThrowsWithFieldsAndChargesNothing) {
  auto victim = build_detector<float>(victim_spec(), 22);
  InProcessOracle oracle(victim, 100);
  try {
    oracle.query(batch_of(256));
    FAIL() << "overdraw accepted";
  } catch (const BudgetExhausted& e) {
    EXPECT_EQ(e.remaining, 100);
    EXPECT_EQ(e.requested, 256);
    EXPECT_NE(std::string(e.what()).find("100"), std::string::npos);
  }
  EXPECT_EQ(oracle.remaining(), 100);
  EXPECT_THROW(oracle.query(Tensor<float>(0, 8, 8, 3)), std::invalid_argument);
  EXPECT_EQ(oracle.remaining(), 100);
}

TEST(InProcess, PredictUnchargedBypassesTheMeterOnly) {
  auto victim = build_detector<float>(victim_spec(), 23);
  InProcessOracle oracle(victim, 50);
  auto x = batch_of(10);
  auto free_answers = oracle.predict_uncharged(x);
  EXPECT_EQ(oracle.remaining(), 50);
  auto paid = oracle.query(x);
  EXPECT_EQ(oracle.remaining(), 40);
  for (std::size_t i = 0; i < paid.size(); ++i) {
    EXPECT_EQ(free_answers[i].probs, paid[i].probs);
    EXPECT_EQ(free_answers[i].box, paid[i].box);
  }
}

TEST(InProcess, InfoDescribesTheVictim) {
  auto victim = build_detector<float>(victim_spec(), 24);
  InProcessOracle oracle(victim, 10, "victim-x");
  auto i = oracle.info();
  EXPECT_EQ(i.protocol, 1);
  EXPECT_EQ(i.class_count, 3);
  EXPECT_EQ(i.height, 8);
  EXPECT_EQ(i.width, 8);
  EXPECT_EQ(i.channels, 3);
  EXPECT_EQ(i.victim_id, "victim-x");
}

TEST(InProcess, ConcurrentQueriesAccountExactly) {
  auto victim = build_detector<float>(victim_spec(), 25);
  InProcessOracle oracle(victim, 1000);
  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&oracle, &failures, t] {
      auto x = batch_of(8, 100 + t);
      for (int q = 0; q < 10; ++q) {
        try {
          if (oracle.query(x).size() != 8) ++failures;
        } catch (const std::exception&) {
          ++failures;
        }
      }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(failures.load(), 0);
  EXPECT_EQ(oracle.remaining(), 1000 - 4 * 10 * 8);
}

TEST(HttpWire, UrlParsing) {
  auto ep = parse_http_url("http://127.0.0.1:8080");
  EXPECT_EQ(ep.host, "127.0.0.1");
  EXPECT_EQ(ep.port, 8080);
  EXPECT_EQ(parse_http_url("http://box:99/").port, 99);
  EXPECT_THROW(parse_http_url("https://box:99"), std::invalid_argument);
  EXPECT_THROW(parse_http_url("http://box"), std::invalid_argument);
  EXPECT_THROW(parse_http_url("http://:8080"), std::invalid_argument);
  EXPECT_THROW(parse_http_url("http://box:"), std::invalid_argument);
  EXPECT_THROW(parse_http_url("http://box:notaport"), std::invalid_argument);
  EXPECT_THROW(parse_http_url("http://box:70000"), std::invalid_argument);
}

TEST(HttpWire, MatchesInProcessAnswersAndDeltas) {
  auto victim = build_detector<float>(victim_spec(), 26);
  OracleServer server(victim, 1000, "127.0.0.1", 0);
  HttpOracle client(server.url());

  auto i = client.info();
  EXPECT_EQ(i.class_count, 3);
  EXPECT_EQ(i.height, 8);

  auto x = batch_of(6);
  auto local = server.oracle().predict_uncharged(x);
  auto wire = client.query(x);
  ASSERT_EQ(wire.size(), 6u);
  for (int n = 0; n < 6; ++n) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(wire[n].probs[c], local[n].probs[c], 1e-5);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(wire[n].box[k], local[n].box[k], 1e-5);
  }
  // both views agree the batch cost exactly six
  EXPECT_EQ(client.remaining(), 994);
  EXPECT_EQ(server.oracle().remaining(), 994);
}

TEST(HttpWire, MalformedRequestsCostNothing) {
  auto victim = build_detector<float>(victim_spec(), 27);
  OracleServer server(victim, 100, "127.0.0.1", 0);
  httplib::Client raw("127.0.0.1", server.port());

  auto res = raw.Post("/v1/predict", "this is not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);

  // right JSON, wrong image geometry
  Tensor<float> small(1, 4, 4, 3);
  res = raw.Post("/v1/predict", tensor_to_json(small).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);

  res = raw.Get("/v1/budget");
  ASSERT_TRUE(res);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j.at("consumed").get<long long>(), 0);
  EXPECT_EQ(j.at("remaining").get<long long>(), 100);
}

TEST(HttpWire, OverdrawAnswers429WithRemaining) {
  auto victim = build_detector<float>(victim_spec(), 28);
  OracleServer server(victim, 10, "127.0.0.1", 0);
  HttpOracle client(server.url());
  try {
    client.query(batch_of(16));
    FAIL() << "overdraw accepted";
  } catch (const BudgetExhausted& e) {
    EXPECT_EQ(e.remaining, 10);
    EXPECT_EQ(e.requested, 16);
  }
  EXPECT_EQ(client.remaining(), 10);
}

TEST(HttpWire, RemainingBudgetHeaderTracksTheMeter) {
  auto victim = build_detector<float>(victim_spec(), 29);
  OracleServer server(victim, 100, "127.0.0.1", 0);
  httplib::Client raw("127.0.0.1", server.port());
  auto res = raw.Post("/v1/predict", tensor_to_json(batch_of(4)).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("X-Remaining-Budget"), "96");
  EXPECT_EQ(nlohmann::json::parse(res->body).at("remaining").get<long long>(), 96);
}

TEST(HttpWire, ReconnectSeesTheSameMeter) {
  auto victim = build_detector<float>(victim_spec(), 30);
  OracleServer server(victim, 1000, "127.0.0.1", 0);
  {
    HttpOracle first(server.url());
    first.query(batch_of(6));
    EXPECT_EQ(first.remaining(), 994);
  }
  HttpOracle second(server.url());  // budget lives with the server
  EXPECT_EQ(second.remaining(), 994);
  second.query(batch_of(4));
  EXPECT_EQ(second.remaining(), 990);
}

TEST(HttpWire, ProtocolMismatchIsATransportError) {
  httplib::Server fake;
  fake.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(nlohmann::json{{"protocol", 2},
                                   {"class_count", 3},
                                   {"input", {{"height", 8}, {"width", 8}, {"channels", 3}}},
                                   {"victim_id", "future"}}
                        .dump(),
                    "application/json");
  });
  const int port = fake.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&fake] { fake.listen_after_bind(); });
  fake.wait_until_ready();
  try {
    HttpOracle client("http://127.0.0.1:" + std::to_string(port));
    ADD_FAILURE() << "v2 server accepted";
  } catch (const TransportError& e) {
    EXPECT_NE(std::string(e.what()).find("protocol"), std::string::npos) << e.what();
  }
  fake.stop();
  th.join();
}

TEST(HttpWire, UnreachableHostIsATransportError) {
  EXPECT_THROW(HttpOracle("http://127.0.0.1:1"), TransportError);
}

TEST(HttpWire, InfoEndpointCarriesAllFields) {
  auto victim = build_detector<float>(victim_spec(), 31);
  OracleServer server(victim, 5, "127.0.0.1", 0, "victim-under-test");
  httplib::Client raw("127.0.0.1", server.port());
  auto res = raw.Get("/v1/info");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j.at("protocol").get<int>(), 1);
  EXPECT_EQ(j.at("class_count").get<int>(), 3);
  EXPECT_EQ(j.at("input").at("height").get<int>(), 8);
  EXPECT_EQ(j.at("input").at("width").get<int>(), 8);
  EXPECT_EQ(j.at("input").at("channels").get<int>(), 3);
  EXPECT_EQ(j.at("victim_id").get<std::string>(), "victim-under-test");
}
