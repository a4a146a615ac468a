#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "facetsteer/chat_client.hpp"

#include <cstdlib>
#include <thread>

#include <fmt/format.h>

#include "facetsteer/error.hpp"
#include "httplib.h"

namespace facetsteer {

nlohmann::ordered_json ChatClientConfig::to_json() const {
  return {{"url", url},
          {"model", model},
          {"timeout_s", timeout_s},
          {"max_retries", max_retries},
          {"backoff_initial_s", backoff_initial_s},
          {"api_key_env", api_key_env}};
}

ChatClientConfig ChatClientConfig::from_json(const nlohmann::json& j) {
  ChatClientConfig c;
  try {
    if (!j.contains("url")) throw ConfigError("chat client config: missing key \"url\"");
    c.url = j.at("url").get<std::string>();
    c.model = j.value("model", c.model);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_initial_s = j.value("backoff_initial_s", c.backoff_initial_s);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("chat client config: ") + e.what());
  }
  if (c.max_retries < 0) throw ConfigError("chat client max_retries must be >= 0");
  if (!(c.timeout_s > 0.0)) throw ConfigError("chat client timeout_s must be > 0");
  return c;
}

HttpChatClient::HttpChatClient(ChatClientConfig cfg) : cfg_(std::move(cfg)) {
  const auto scheme_end = cfg_.url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError(fmt::format("chat client url \"{}\" has no scheme", cfg_.url));
  const auto path_start = cfg_.url.find('/', scheme_end + 3);
  origin_ = cfg_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
}

std::string HttpChatClient::complete(const std::string& system, const std::string& user) const {
  httplib::Client cli(origin_);
  const auto secs = static_cast<time_t>(cfg_.timeout_s);
  const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) cli.set_bearer_token_auth(key);

  const nlohmann::json body = {{"model", cfg_.model},
                               {"temperature", 0},
                               {"messages",
                                {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}}}};
  auto res = cli.Post(path_, body.dump(), "application/json");
  if (!res) throw ClientError(fmt::format("request to {} failed: {}", cfg_.url, httplib::to_string(res.error())));
  if (res->status != 200) throw ClientError(fmt::format("request to {} returned HTTP {}", cfg_.url, res->status));
  try {
    const auto reply = nlohmann::json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ClientError(fmt::format("unexpected chat-completion reply: {}", e.what()));
  }
}

void retry_loop(const std::function<void()>& attempt, int max_retries, std::chrono::duration<double> backoff_initial) {
  auto delay = backoff_initial;
  std::string last;
  for (int i = 0; i <= max_retries; ++i) {
    if (i > 0) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
    try {
      attempt();
      return;
    } catch (const ClientError& e) {
      last = e.what();
    } catch (const SchemaError& e) {
      last = e.what();
    } catch (const ParseError& e) {
      last = e.what();
    }
  }
  throw ClientError(fmt::format("giving up after {} attempts: {}", max_retries + 1, last));
}

nlohmann::json extract_json_object(const std::string& text) {
  for (std::size_t start = text.find('{'); start != std::string::npos; start = text.find('{', start + 1)) {
    for (std::size_t end = text.rfind('}'); end != std::string::npos && end > start; end = text.rfind('}', end - 1)) {
      auto j = nlohmann::json::parse(text.begin() + static_cast<std::ptrdiff_t>(start),
                                     text.begin() + static_cast<std::ptrdiff_t>(end) + 1, nullptr, false);
      if (!j.is_discarded() && j.is_object()) return j;
      if (end == 0) break;
    }
  }
  throw SchemaError("reply contains no JSON object");
}

}  // namespace facetsteer
