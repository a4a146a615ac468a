#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "doctest.h"
#include "facetsteer/chat_client.hpp"
#include "facetsteer/error.hpp"
#include "facetsteer/routing.hpp"
#include "facetsteer/steering.hpp"
#include "httplib.h"

using namespace facetsteer;

namespace {

class FakeClient : public ChatClient {
 public:
  explicit FakeClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string complete(const std::string& system, const std::string& user) const override {
    std::lock_guard lock(mu_);
    last_system = system;
    last_user = user;
    const std::size_t k = calls++;
    if (replies_.empty()) throw ClientError("connection refused");
    return replies_[std::min(k, replies_.size() - 1)];
  }
  mutable std::size_t calls = 0;
  mutable std::string last_system, last_user;

 private:
  std::vector<std::string> replies_;
  mutable std::mutex mu_;
};

std::set<FacetId> every_facet() {
  const auto all = all_facets();
  return {all.begin(), all.end()};
}

FacetScores scores_with(std::initializer_list<std::pair<const char*, double>> values) {
  FacetScores s;
  for (auto [name, v] : values) s[parse_facet(name)] = v;
  return s;
}

ControlVector cv_with(const char* facet, Eigen::VectorXd decoded) {
  ControlVector cv;
  cv.facet = parse_facet(facet);
  cv.decoded = std::move(decoded);
  return cv;
}

}  // namespace

TEST_CASE("keyword scorer") {
  const KeywordScorer scorer;
  const FacetScores s = score_facets("writing advice", scorer);
  CHECK(s.scorer_tag == "keyword-v1");
  double best_openness = 0.0, best_extraversion = 0.0;
  for (FacetId f : all_facets()) {
    if (f.dimension == Dimension::Openness) best_openness = std::max(best_openness, s[f]);
    if (f.dimension == Dimension::Extraversion) best_extraversion = std::max(best_extraversion, s[f]);
  }
  CHECK(best_openness > best_extraversion);
  for (FacetId f : all_facets())
    if (f.dimension == Dimension::Openness && s[f] > 0.0) CHECK(s[f] > best_extraversion);

  const FacetScores none = score_facets("the of and", scorer);
  for (double v : none.scores) CHECK(v == 0.0);
  const FacetScores zero = score_facets("quantum chromodynamics lattice", scorer);
  for (double v : zero.scores) CHECK(v == 0.0);

  CHECK(score_facets("Give me writing advice for a party", scorer) ==
        score_facets("Give me writing advice for a party", scorer));
  CHECK_THROWS_AS(score_facets("", scorer), PreconditionError);
  CHECK(is_stopword("the"));
  CHECK_FALSE(is_stopword("writing"));
}

TEST_CASE("score_batch preserves order") {
  const KeywordScorer scorer;
  const std::vector<std::string> queries{"writing advice", "a loud party with friends", "quiet", "my anxiety"};
  const auto out = score_batch(scorer, queries, 2);
  REQUIRE(out.size() == queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) CHECK(out[i] == scorer.score(queries[i]));
}

TEST_CASE("select_cvs") {
  RoutingPolicy policy;
  const auto all = every_facet();

  policy.threshold = 0.1;
  CHECK(select_cvs(FacetScores{}, policy, all).empty());

  CHECK(select_cvs(scores_with({{"Trust", 0.9}}), policy, all) == std::vector<FacetId>{parse_facet("Trust")});

  const FacetScores two = scores_with({{"Warmth", 0.7}, {"Gregariousness", 0.8}});
  CHECK(select_cvs(two, policy, all) == std::vector<FacetId>{parse_facet("Gregariousness")});
  policy.per_dimension_top_k = 2;
  CHECK(select_cvs(two, policy, all) == std::vector<FacetId>{parse_facet("Warmth"), parse_facet("Gregariousness")});
  policy.per_dimension_top_k = 1;

  SUBCASE("ties go to the lower facet index") {
    const FacetScores tie = scores_with({{"Fantasy", 0.5}, {"Ideas", 0.5}});
    CHECK(select_cvs(tie, policy, all) == std::vector<FacetId>{parse_facet("Fantasy")});
  }
  SUBCASE("unavailable facets are skipped") {
    std::set<FacetId> some = all;
    some.erase(parse_facet("Gregariousness"));
    CHECK(select_cvs(two, policy, some) == std::vector<FacetId>{parse_facet("Warmth")});
  }
  SUBCASE("threshold is inclusive") {
    policy.threshold = 0.8;
    CHECK(select_cvs(two, policy, all) == std::vector<FacetId>{parse_facet("Gregariousness")});
  }
  SUBCASE("policy validation") {
    policy.per_dimension_top_k = 0;
    CHECK_THROWS_AS(policy.validate(), ConfigError);
    policy.per_dimension_top_k = 1;
    policy.threshold = 1.5;
    CHECK_THROWS_AS(policy.validate(), ConfigError);
  }
}

TEST_CASE("select_cvs properties over random score vectors") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RoutingPolicy policy;
  const auto all = every_facet();
  for (int trial = 0; trial < 500; ++trial) {
    FacetScores s;
    for (double& v : s.scores) v = u(rng) < 0.5 ? 0.0 : u(rng);
    const auto picked = select_cvs(s, policy, all);
    std::set<Dimension> dims;
    for (FacetId f : picked) CHECK(dims.insert(f.dimension).second);
    CHECK(std::is_sorted(picked.begin(), picked.end()));
    for (FacetId f : picked) {
      FacetScores raised = s;
      raised[f] = std::min(1.0, s[f] + u(rng) * (1.0 - s[f]));
      const auto again = select_cvs(raised, policy, all);
      CHECK(std::find(again.begin(), again.end(), f) != again.end());
    }
  }
}

TEST_CASE("compose_injection") {
  CvBank bank;
  bank.emplace(parse_facet("Ideas"), cv_with("Ideas", Eigen::Vector3d(1, 0, 2)));
  bank.emplace(parse_facet("Trust"), cv_with("Trust", Eigen::Vector3d(0, 4, -1)));
  CHECK(available_facets(bank).size() == 2);

  CHECK(compose_injection({}, bank, 1, {}, 1.0).empty());

  const InjectionPlan one = compose_injection({parse_facet("Ideas")}, bank, 1, {}, 1.0);
  REQUIRE(one.entries.size() == 1);
  CHECK(one.entries[0].vector == Eigen::Vector3d(1, 0, 2));
  CHECK(one.entries[0].alpha == 1.0);
  CHECK(one.entries[0].layer == 1);
  CHECK(one.entries[0].facet == parse_facet("Ideas"));

  const InjectionPlan two =
      compose_injection({parse_facet("Ideas"), parse_facet("Trust")}, bank, 0, {{parse_facet("Trust"), 0.5}}, 2.0);
  Eigen::VectorXd h = Eigen::Vector3d(1, 1, 1);
  for (const auto& e : two.entries) h = inject(h, e);
  CHECK(h == Eigen::Vector3d(1 + 2, 1 + 2, 1 + 4 - 0.5));

  CHECK_THROWS_AS(compose_injection({parse_facet("Order")}, bank, 0, {}, 1.0), PreconditionError);
  bank.emplace(parse_facet("Order"), cv_with("Order", Eigen::Vector2d(1, 1)));
  CHECK_THROWS_AS(compose_injection({parse_facet("Ideas"), parse_facet("Order")}, bank, 0, {}, 1.0), DimensionError);
}

TEST_CASE("empty selection leaves the toy output bit-identical") {
  const ToyModel m = make_toy_model(3, 2, 2, 4);
  CvBank bank;
  bank.emplace(parse_facet("Ideas"), cv_with("Ideas", Eigen::Vector3d(1, 0, 2)));
  const KeywordScorer scorer;
  const auto selected = select_cvs(score_facets("quantum chromodynamics", scorer), RoutingPolicy{}, available_facets(bank));
  CHECK(selected.empty());
  const Eigen::VectorXd h0 = Eigen::Vector3d(0.3, -0.2, 0.9);
  const ToyRun steered = run_toy(m, h0, compose_injection(selected, bank, 1, {}, 1.0));
  const ToyRun base = run_toy(m, h0);
  CHECK(steered.logits == base.logits);
  CHECK(steered.final_hidden == base.final_hidden);
}

TEST_CASE("chat scorer") {
  SUBCASE("parses, clips and fills missing facets") {
    auto client = std::make_shared<FakeClient>(std::vector<std::string>{
        "Sure!\n```json\n{\"facet_scores\": {\"Ideas\": 1.7, \"Trust\": 0.4, \"Anxiety\": -2}}\n```"});
    const ChatScorer scorer(client, 0, 0.0);
    const FacetScores s = scorer.score("writing advice");
    CHECK(s[parse_facet("Ideas")] == 1.0);
    CHECK(s[parse_facet("Trust")] == 0.4);
    CHECK(s[parse_facet("Anxiety")] == 0.0);
    CHECK(s[parse_facet("Order")] == 0.0);
    CHECK(s.scorer_tag == "chat");
    CHECK(client->last_user.find("writing advice") != std::string::npos);
    CHECK(client->last_system == ChatScorer::system_instruction());
  }
  SUBCASE("schema violations are rejected") {
    CHECK_THROWS_AS(ChatScorer::parse_reply(R"({"facet_scores": {"Assertivness": 0.5}})"), SchemaError);
    CHECK_THROWS_AS(ChatScorer::parse_reply(R"({"facet_scores": {"Ideas": "high"}})"), SchemaError);
    CHECK_THROWS_AS(ChatScorer::parse_reply(R"({"scores": {}})"), SchemaError);
    CHECK_THROWS_AS(ChatScorer::parse_reply("no json here"), SchemaError);
  }
  SUBCASE("retries until a valid reply") {
    auto client = std::make_shared<FakeClient>(
        std::vector<std::string>{"garbage", R"({"facet_scores": {"Ideas": "x"}})", R"({"facet_scores": {"Ideas": 0.5}})"});
    const ChatScorer scorer(client, 2, 0.0);
    CHECK(scorer.score("q")[parse_facet("Ideas")] == 0.5);
    CHECK(client->calls == 3);
  }
  SUBCASE("gives up after the retry budget") {
    auto client = std::make_shared<FakeClient>(std::vector<std::string>{});
    const ChatScorer scorer(client, 2, 0.0);
    CHECK_THROWS_WITH_AS(scorer.score("q"), doctest::Contains("giving up after 3 attempts"), ClientError);
    CHECK(client->calls == 3);
  }
}

TEST_CASE("HTTP chat client against a local endpoint") {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string seen_auth, seen_body;
  std::mutex mu;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++hits;
    {
      std::lock_guard lock(mu);
      seen_auth = req.get_header_value("Authorization");
      seen_body = req.body;
    }
    if (n == 1) {
      res.status = 503;
      return;
    }
    nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "hello"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("FACETSTEER_TEST_KEY", "sekret", 1);
  ChatClientConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "toy-judge";
  cfg.api_key_env = "FACETSTEER_TEST_KEY";
  cfg.timeout_s = 5.0;
  const HttpChatClient client(cfg);

  CHECK_THROWS_WITH_AS(client.complete("sys", "usr"), doctest::Contains("HTTP 503"), ClientError);
  CHECK(client.complete("sys", "usr") == "hello");
  {
    std::lock_guard lock(mu);
    CHECK(seen_auth == "Bearer sekret");
    const auto body = nlohmann::json::parse(seen_body);
    CHECK(body["model"] == "toy-judge");
    CHECK(body["temperature"] == 0);
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][1]["content"] == "usr");
  }
  server.stop();
  worker.join();

  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  CHECK_THROWS_AS(HttpChatClient(cfg).complete("s", "u"), ClientError);
  cfg.url = "no-scheme";
  CHECK_THROWS_AS(HttpChatClient{cfg}, ConfigError);
  CHECK_THROWS_AS(ChatClientConfig::from_json(nlohmann::json::object()), ConfigError);
}
