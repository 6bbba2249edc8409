#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "i2a/tensor.hpp"

namespace i2a::instructions {

struct Instruction {
    enum class Source { manual, generated };

    std::string text;
    Source source = Source::manual;
    std::optional<std::string> category;
};

// The four built-in editing prompts, in their canonical order.
std::vector<Instruction> builtin_prompts();

struct FewShotExample {
    std::string input;
    std::string edit;
    std::string output;
    std::string category;
};

// Few-shot prompt for the instruction-writing language model. The preamble
// carries the category-preservation rule; extra user examples can be
// appended after the shipped ones.
struct PromptTemplate {
    std::string preamble;
    std::vector<std::string> guidelines;
    std::vector<FewShotExample> examples;

    static PromptTemplate standard();
    std::string render(const std::string& caption, const std::string& category) const;
};

class LlmClient {
  public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

class CaptionClient {
  public:
    virtual ~CaptionClient() = default;
    virtual std::string caption_image(const Tensor& image) = 0;
};

struct RetryPolicy {
    int max_attempts = 3;
    int backoff_ms = 250;  // doubled after every failed attempt
};

// Runs fn, retrying TransportError with exponential backoff; rethrows the
// last error once attempts are exhausted.
std::string with_retries(const std::function<std::string()>& fn, const RetryPolicy& policy);

std::string caption(const Tensor& image, CaptionClient& client, const RetryPolicy& policy = {});

// Accepts either a bare edit string or a {"edit": "..."} record.
std::string parse_edit_response(const std::string& raw);

Instruction generate_instruction(const std::string& caption, const std::string& category,
                                 LlmClient& client, const PromptTemplate& tmpl,
                                 const RetryPolicy& policy = {});

// HTTP chat-completions client. Endpoint like "http://host:port"; the key is
// read from the environment (never stored in config files).
struct HttpClientConfig {
    std::string endpoint;
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env = "I2A_LLM_API_KEY";
    double temperature = 0.0;
    int timeout_s = 60;
};

class HttpLlmClient : public LlmClient {
  public:
    explicit HttpLlmClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {}
    std::string complete(const std::string& prompt) override;

  private:
    HttpClientConfig cfg_;
};

class HttpCaptionClient : public CaptionClient {
  public:
    explicit HttpCaptionClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {}
    std::string caption_image(const Tensor& image) override;

  private:
    HttpClientConfig cfg_;
};

// Per-image-id persistence of generated captions/instructions so reruns are
// deterministic and cheap. Safe for concurrent get/put; last writer wins.
class InstructionCache {
  public:
    struct Entry {
        std::string caption;
        std::string instruction;
    };

    InstructionCache() = default;
    explicit InstructionCache(const std::string& path);  // missing file -> empty cache

    std::optional<Entry> get(const std::string& image_id) const;
    void put(const std::string& image_id, Entry entry);
    void save(const std::string& path) const;
    size_t size() const;

  private:
    mutable std::mutex mu_;
    std::map<std::string, Entry> entries_;
};

}  // namespace i2a::instructions
