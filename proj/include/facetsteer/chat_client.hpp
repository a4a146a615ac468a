#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <string>

#include "json.hpp"

namespace facetsteer {

// One system + user exchange with a chat-completion endpoint. Implementations
// must be safe to call from several threads.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  // Returns the assistant message content or throws ClientError.
  virtual std::string complete(const std::string& system, const std::string& user) const = 0;
};

struct ChatClientConfig {
  std::string url;  // full endpoint, e.g. https://host/v1/chat/completions
  std::string model;
  double timeout_s = 30.0;
  int max_retries = 2;
  double backoff_initial_s = 0.5;
  std::string api_key_env = "FACETSTEER_API_KEY";

  nlohmann::ordered_json to_json() const;
  static ChatClientConfig from_json(const nlohmann::json& j);
};

// OpenAI-style POST with {"model","messages","temperature":0}; the key from
// `api_key_env` is sent as a bearer token when set.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(ChatClientConfig cfg);
  std::string complete(const std::string& system, const std::string& user) const override;

 private:
  ChatClientConfig cfg_;
  std::string origin_;
  std::string path_;
};

// Calls `client` and hands the reply to `parse`; transport failures and
// parse errors are retried up to `max_retries` times with exponential
// backoff, then surfaced as ClientError with the last failure.
template <typename T>
T complete_with_retries(const ChatClient& client, const std::string& system, const std::string& user,
                        const std::function<T(const std::string&)>& parse, int max_retries,
                        std::chrono::duration<double> backoff_initial);

// Non-template core of complete_with_retries.
void retry_loop(const std::function<void()>& attempt, int max_retries, std::chrono::duration<double> backoff_initial);

template <typename T>
T complete_with_retries(const ChatClient& client, const std::string& system, const std::string& user,
                        const std::function<T(const std::string&)>& parse, int max_retries,
                        std::chrono::duration<double> backoff_initial) {
  std::unique_ptr<T> result;
  retry_loop([&] { result = std::make_unique<T>(parse(client.complete(system, user))); }, max_retries,
             backoff_initial);
  return std::move(*result);
}

// Extracts the first JSON object in `text` (tolerates code fences and prose
// around it); throws SchemaError when none parses.
nlohmann::json extract_json_object(const std::string& text);

}  // namespace facetsteer
