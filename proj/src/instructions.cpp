#include "i2a/instructions.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "i2a/image_io.hpp"
#include "json.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

namespace i2a::instructions {

using nlohmann::json;

std::vector<Instruction> builtin_prompts() {
    return {
        {"make it at night", Instruction::Source::manual, std::nullopt},
        {"make it in snow", Instruction::Source::manual, std::nullopt},
        {"make it a sketch painting", Instruction::Source::manual, std::nullopt},
        {"make it a vintage photo", Instruction::Source::manual, std::nullopt},
    };
}

PromptTemplate PromptTemplate::standard() {
    PromptTemplate t;
    t.preamble =
        "You are now tasked with generating image editing instructions for an advanced image "
        "editing algorithm. When given an image caption, your role is to produce a corresponding "
        "image editing instruction without altering the inherent nature or category of objects "
        "within the image.";
    t.guidelines = {
        "Do not alter the primary category of objects. For instance, if the caption mentions a "
        "\"beer glass\", avoid instructions that would change it to a \"wine glass\".",
        "Preserve the natural and typical attributes of objects. Hence, if the caption mentions "
        "a \"green mamba\", don't instruct to change its color, given that green mambas are "
        "characteristically green.",
        "Ensure that the resulting scene remains plausible. For example, if the caption says, "
        "\"a young orangutan standing on a rock\", refrain from suggesting changes like \"make "
        "the rock green\", which would create an unnatural scenario.",
        "Refrain from introducing drastic global alterations like changing indoor scenes to "
        "outdoor.",
        "Be aware of potential errors in the captions and adhere to the object \"category\".",
        "Prioritize Simplicity. Keep the edits straightforward and uncomplicated.",
    };
    t.examples = {
        {"a close up of a gun on a soldier's shoulder", "as if it were a drawing",
         "a drawing of a gun on a soldier's shoulder", "assault rifle"},
        {"a small chinchilla is being fed a toothbrush", "make the chinchilla white",
         "a white chinchilla is being fed by a syringe", "syringe"},
        {"a close up of a spider with orange legs", "as a painting",
         "a painting of close up of a cockroach with orange legs", "cockroach"},
        {"an old theater curtain with a light shining through it", "turn off the light",
         "an old theater curtain without light shining through it", "theater curtain"},
        {"a laptop computer sitting on a desk with a keyboard", "make it black",
         "a black laptop computer sitting on a desk with a keyboard", "notebook"},
        {"a dog standing on a dirt road next to a pole", "make it at night",
         "a dog standing on a dirt road next to a pole during the night", "malinois"},
        {"a black and white photo of a spiral garden", "make it more colourful",
         "a colourful photo of a spiral garden", "maze"},
        {"a close up of a curtain with a pattern on it", "make it blue",
         "a close up of a blue curtain with a pattern on it", "shower curtain"},
        {"a large dinosaur statue with a big mouth", "add some snow",
         "a large dinosaur statue with a big mouth in snow", "triceratops"},
        {"a bug on the hood of a car", "on Mars", "a bug on the hood of a car on Mars",
         "walking stick"},
        {"a woman wearing a black jacket next to a vending machine",
         "change the jacket to a cape", "a woman wearing a black cape next to a vending machine",
         "vending machine"},
        {"a brown and tan pitcher with a handle on a table", "Make it look like an old photograph",
         "an old photograph of a brown and tan pitcher with a handle on a table", "pitcher"},
        {"a metal gate with a shadow on it", "as if it was a painting",
         "a painting of a metal gate with a shadow on it", "turnstile"},
        {"a green jeep parked in front of a white building", "make the jeep red",
         "a red jeep parked in front of a white building", "jeep"},
    };
    return t;
}

namespace {

std::string record_line(const std::string& input, const std::string& edit,
                        const std::string& output, const std::string& category) {
    json j;
    j["input"] = input;
    j["edit"] = edit;
    j["output"] = output;
    j["category"] = category;
    // Field order fixed by hand to match the record convention.
    std::ostringstream os;
    os << "{\"input\": " << j["input"].dump() << ", \"edit\": " << j["edit"].dump()
       << ", \"output\": " << j["output"].dump() << ", \"category\": " << j["category"].dump()
       << "}";
    return os.str();
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string PromptTemplate::render(const std::string& caption, const std::string& category) const {
    require(!trim(caption).empty(), "prompt render: caption must be non-empty");
    std::ostringstream os;
    os << preamble << "\n\n";
    os << "Guidelines:\n";
    for (size_t i = 0; i < guidelines.size(); ++i) os << (i + 1) << ". " << guidelines[i] << "\n";
    os << "\nHere are some examples:\n\n";
    for (const FewShotExample& ex : examples)
        os << record_line(ex.input, ex.edit, ex.output, ex.category) << "\n";
    os << "\nPlease write edits for the following samples:\n\n";
    json j;
    j["input"] = caption;
    j["category"] = category;
    os << "{\"input\": " << j["input"].dump() << ", \"category\": " << j["category"].dump()
       << ", \"edit\": \"\", \"output\": \"\"}\n";
    return os.str();
}

std::string with_retries(const std::function<std::string()>& fn, const RetryPolicy& policy) {
    require(policy.max_attempts >= 1, "retry policy: max_attempts must be >= 1");
    int backoff = policy.backoff_ms;
    for (int attempt = 1;; ++attempt) {
        try {
            return fn();
        } catch (const TransportError&) {
            if (attempt >= policy.max_attempts) throw;
            if (backoff > 0) std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff *= 2;
        }
    }
}

std::string caption(const Tensor& image, CaptionClient& client, const RetryPolicy& policy) {
    std::string text = with_retries([&] { return client.caption_image(image); }, policy);
    if (trim(text).empty()) throw GenerationError("captioner returned an empty caption");
    return text;
}

std::string parse_edit_response(const std::string& raw) {
    std::string s = trim(raw);
    if (s.empty()) throw ParseError("llm response is empty");
    if (s.front() == '{') {
        json j = json::parse(s, nullptr, false);
        if (j.is_discarded())
            throw ParseError("llm response is not valid json: " + raw);
        if (!j.contains("edit") || !j.at("edit").is_string())
            throw ParseError("llm response is missing the edit field: " + raw);
        std::string edit = trim(j.at("edit").get<std::string>());
        if (edit.empty()) throw ParseError("llm response has an empty edit field: " + raw);
        return edit;
    }
    // Bare edit text; strip one layer of surrounding quotes if present.
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = trim(s.substr(1, s.size() - 2));
    if (s.empty()) throw ParseError("llm response is empty after trimming: " + raw);
    return s;
}

Instruction generate_instruction(const std::string& caption, const std::string& category,
                                 LlmClient& client, const PromptTemplate& tmpl,
                                 const RetryPolicy& policy) {
    require(!trim(caption).empty(), "generate_instruction: caption must be non-empty");
    std::string prompt = tmpl.render(caption, category);
    std::string raw = with_retries([&] { return client.complete(prompt); }, policy);
    Instruction out;
    out.text = parse_edit_response(raw);
    out.source = Instruction::Source::generated;
    if (!category.empty()) out.category = category;
    return out;
}

namespace {

std::string api_key_from_env(const std::string& env) {
    const char* v = std::getenv(env.c_str());
    return v ? std::string(v) : std::string();
}

json post_json(const HttpClientConfig& cfg, const json& payload) {
    httplib::Client client(cfg.endpoint);
    client.set_connection_timeout(cfg.timeout_s);
    client.set_read_timeout(cfg.timeout_s);
    httplib::Headers headers;
    std::string key = api_key_from_env(cfg.api_key_env);
    if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
    auto res = client.Post(cfg.path, headers, payload.dump(), "application/json");
    if (!res)
        throw TransportError("http request to " + cfg.endpoint + cfg.path + " failed: " +
                             httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300)
        throw TransportError("http request to " + cfg.endpoint + cfg.path +
                             " returned status " + std::to_string(res->status));
    json j = json::parse(res->body, nullptr, false);
    if (j.is_discarded()) throw ParseError("service returned invalid json: " + res->body);
    return j;
}

}  // namespace

std::string HttpLlmClient::complete(const std::string& prompt) {
    json payload;
    payload["model"] = cfg_.model;
    payload["temperature"] = cfg_.temperature;
    payload["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    json j = post_json(cfg_, payload);
    try {
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception&) {
        throw ParseError("llm response missing choices[0].message.content: " + j.dump());
    }
}

std::string HttpCaptionClient::caption_image(const Tensor& image) {
    json payload;
    payload["model"] = cfg_.model;
    payload["image_png_b64"] = [&] {
        static const char* alphabet =
            "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        std::string png = imageio::encode_png(image);
        std::string out;
        out.reserve((png.size() + 2) / 3 * 4);
        for (size_t i = 0; i < png.size(); i += 3) {
            uint32_t v = static_cast<uint8_t>(png[i]) << 16;
            if (i + 1 < png.size()) v |= static_cast<uint8_t>(png[i + 1]) << 8;
            if (i + 2 < png.size()) v |= static_cast<uint8_t>(png[i + 2]);
            out.push_back(alphabet[(v >> 18) & 63]);
            out.push_back(alphabet[(v >> 12) & 63]);
            out.push_back(i + 1 < png.size() ? alphabet[(v >> 6) & 63] : '=');
            out.push_back(i + 2 < png.size() ? alphabet[v & 63] : '=');
        }
        return out;
    }();
    json j = post_json(cfg_, payload);
    try {
        return j.at("caption").get<std::string>();
    } catch (const std::exception&) {
        throw ParseError("caption response missing the caption field: " + j.dump());
    }
}

InstructionCache::InstructionCache(const std::string& path) {
    std::ifstream f(path);
    if (!f) return;
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError("instruction cache parse failure in " + path + ": " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        Entry e;
        e.caption = it.value().value("caption", "");
        e.instruction = it.value().value("instruction", "");
        entries_[it.key()] = std::move(e);
    }
}

std::optional<InstructionCache::Entry> InstructionCache::get(const std::string& image_id) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(image_id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void InstructionCache::put(const std::string& image_id, Entry entry) {
    std::lock_guard<std::mutex> lock(mu_);
    entries_[image_id] = std::move(entry);
}

void InstructionCache::save(const std::string& path) const {
    std::lock_guard<std::mutex> lock(mu_);
    json j = json::object();
    for (const auto& [id, e] : entries_) {
        j[id] = json{{"caption", e.caption}, {"instruction", e.instruction}};
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot write instruction cache: " + path);
    f << j.dump(2) << "\n";
}

size_t InstructionCache::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
}

}  // namespace i2a::instructions
