#include "i2a/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include "i2a/image_io.hpp"
#include "json.hpp"

namespace i2a::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::load(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw InputError("cannot open dataset manifest: " + manifest_path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError("dataset manifest parse failure in " + manifest_path + ": " + e.what());
    }
    Dataset ds;
    ds.base_dir = fs::path(manifest_path).parent_path().string();
    if (j.contains("resize")) {
        ds.resize_h = j.at("resize").at(0).get<int>();
        ds.resize_w = j.at("resize").at(1).get<int>();
    }
    if (j.contains("labels")) ds.label_names = j.at("labels").get<std::vector<std::string>>();
    for (const auto& ij : j.at("items")) {
        DatasetItem item;
        item.image_id = ij.at("id").get<std::string>();
        item.image_path = ij.at("path").get<std::string>();
        item.label = ij.at("label").get<int>();
        if (ij.contains("caption")) item.caption = ij.at("caption").get<std::string>();
        if (ij.contains("category")) item.category = ij.at("category").get<std::string>();
        ds.items.push_back(std::move(item));
    }
    ds.validate();
    return ds;
}

void Dataset::validate() const {
    require(resize_h >= 1 && resize_w >= 1, "dataset: resize target must be positive");
    std::map<std::string, int> seen;
    for (const DatasetItem& item : items) {
        require(!item.image_id.empty(), "dataset: empty image id");
        require(seen.emplace(item.image_id, 1).second,
                "dataset: duplicate image id " + item.image_id);
        require(item.label >= 0, "dataset: negative label for " + item.image_id);
        if (!label_names.empty())
            require(item.label < static_cast<int>(label_names.size()),
                    "dataset: label out of range for " + item.image_id);
    }
}

Tensor Dataset::load_image(const DatasetItem& item) const {
    fs::path p(item.image_path);
    if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
    Tensor img = imageio::load_image(p.string());
    img = imageio::resize_bilinear(img, resize_h, resize_w);
    for (double& v : img.data) v = std::min(1.0, std::max(0.0, v));
    return img;
}

// ---------------------------------------------------------------------------
// Records

namespace {

json record_to_json(const RunRecord& r) {
    json j;
    j["image_id"] = r.image_id;
    j["prompt"] = r.prompt;
    j["attack"] = r.attack;
    j["source_model"] = r.source_model;
    j["target_model"] = r.target_model;
    j["predicted"] = r.predicted;
    j["label"] = r.label;
    j["success"] = r.success;
    j["lpips"] = r.lpips;
    j["constraint_met"] = r.constraint_met;
    j["iterations"] = r.iterations;
    j["wall_time_s"] = r.wall_time_s;
    j["seed"] = r.seed;
    j["error"] = r.error;
    return j;
}

RunRecord record_from_json(const json& j) {
    RunRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.attack = j.at("attack").get<std::string>();
    r.source_model = j.at("source_model").get<std::string>();
    r.target_model = j.at("target_model").get<std::string>();
    r.predicted = j.at("predicted").get<int>();
    r.label = j.at("label").get<int>();
    r.success = j.at("success").get<bool>();
    r.lpips = j.at("lpips").get<double>();
    r.constraint_met = j.at("constraint_met").get<bool>();
    r.iterations = j.at("iterations").get<int>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.seed = j.at("seed").get<uint64_t>();
    r.error = j.value("error", "");
    return r;
}

}  // namespace

void write_records(const std::string& path, const std::vector<RunRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot write records file: " + path);
    json header;
    header["schema_version"] = kRecordSchemaVersion;
    header["kind"] = "i2a-run-records";
    f << header.dump() << "\n";
    for (const RunRecord& r : records) f << record_to_json(r).dump() << "\n";
}

std::vector<RunRecord> read_records(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open records file: " + path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError("records file is empty: " + path);
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("kind", "") != "i2a-run-records")
        throw ParseError("records file has a bad header: " + path);
    if (header.value("schema_version", -1) != kRecordSchemaVersion)
        throw ParseError("records file has an unsupported schema version: " + path);
    std::vector<RunRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError("bad record line in " + path + ": " + line);
        out.push_back(record_from_json(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace {

struct Bucket {
    int count = 0;
    int correct = 0;
    int violations = 0;
    double lpips_sum = 0.0;
};

ReportRow bucket_row(const std::string& group, const std::string& prompt,
                     const std::string& source, const std::string& target, const Bucket& b) {
    ReportRow row;
    row.group = group;
    row.prompt = prompt;
    row.source_model = source;
    row.target_model = target;
    row.count = b.count;
    if (b.count > 0) {
        row.accuracy_pct = 100.0 * b.correct / b.count;
        row.failure_pct = 100.0 * b.violations / b.count;
        row.mean_lpips = b.lpips_sum / b.count;
    }
    return row;
}

}  // namespace

ReportTable aggregate(const std::vector<RunRecord>& records) {
    // Keyed by (group="" here; callers re-tag), prompt, source, target.
    std::map<std::tuple<std::string, std::string, std::string>, Bucket> per_prompt;
    std::map<std::pair<std::string, std::string>, Bucket> overall;
    for (const RunRecord& r : records) {
        if (!r.error.empty()) continue;
        Bucket& b = per_prompt[{r.prompt, r.source_model, r.target_model}];
        Bucket& o = overall[{r.source_model, r.target_model}];
        for (Bucket* x : {&b, &o}) {
            x->count += 1;
            x->correct += r.success ? 0 : 1;
            x->violations += r.constraint_met ? 0 : 1;
            x->lpips_sum += r.lpips;
        }
    }
    ReportTable table;
    for (const auto& [key, b] : per_prompt)
        table.rows.push_back(
            bucket_row("", std::get<0>(key), std::get<1>(key), std::get<2>(key), b));
    for (const auto& [key, b] : overall)
        table.rows.push_back(bucket_row("", "(all)", key.first, key.second, b));
    return table;
}

std::string ReportTable::to_csv() const {
    std::ostringstream os;
    bool any_fid = std::any_of(rows.begin(), rows.end(),
                               [](const ReportRow& r) { return r.fid.has_value(); });
    os << "group,prompt,source_model,target_model,count,accuracy_pct,failure_pct,mean_lpips";
    if (any_fid) os << ",fid";
    os << "\n";
    auto quote = [](const std::string& s) {
        std::string out = "\"";
        for (char c : s) {
            if (c == '"') out += "\"\"";
            else out += c;
        }
        out += "\"";
        return out;
    };
    for (const ReportRow& r : rows) {
        os << quote(r.group) << "," << quote(r.prompt) << "," << quote(r.source_model) << ","
           << quote(r.target_model) << "," << r.count << "," << r.accuracy_pct << ","
           << r.failure_pct << "," << r.mean_lpips;
        if (any_fid) {
            os << ",";
            if (r.fid) os << *r.fid;
        }
        os << "\n";
    }
    return os.str();
}

uint64_t per_image_seed(uint64_t global_seed, const std::string& image_id) {
    return splitmix64(global_seed ^ fnv1a64(image_id));
}

std::string prompt_slug(const std::string& prompt) {
    std::string out;
    bool prev_dash = false;
    for (char c : prompt) {
        char l = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if ((l >= 'a' && l <= 'z') || (l >= '0' && l <= '9')) {
            out.push_back(l);
            prev_dash = false;
        } else if (!prev_dash && !out.empty()) {
            out.push_back('-');
            prev_dash = true;
        }
    }
    while (!out.empty() && out.back() == '-') out.pop_back();
    return out.empty() ? "prompt" : out;
}

// ---------------------------------------------------------------------------
// Config

KeyValueConfig KeyValueConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line " + std::to_string(lineno) + " is not key = value: " + line);
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        require(!key.empty(), "config line " + std::to_string(lineno) + " has an empty key");
        cfg.values_[key] = value;
    }
    return cfg;
}

bool KeyValueConfig::has(const std::string& key) const {
    return values_.count(key) > 0;
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ParseError("config key " + key + " is not a number: " + it->second);
    }
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw ParseError("config key " + key + " is not an integer: " + it->second);
    }
}

uint64_t KeyValueConfig::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw ParseError("config key " + key + " is not an unsigned integer: " + it->second);
    }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ParseError("config key " + key + " is not a boolean: " + v);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
    values_[key] = value;
}

// ---------------------------------------------------------------------------
// Adapter construction

namespace {

Shape parse_shape(const std::string& text) {
    Shape s;
    std::string part;
    std::istringstream in(text);
    while (std::getline(in, part, 'x')) {
        try {
            s.push_back(std::stoi(part));
        } catch (const std::exception&) {
            throw ParseError("bad shape spec: " + text);
        }
    }
    require(!s.empty(), "bad shape spec: " + text);
    return s;
}

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> out;
    std::string part;
    std::istringstream in(text);
    while (std::getline(in, part, sep))
        if (!part.empty()) out.push_back(part);
    return out;
}

std::shared_ptr<models::Backend> make_backend(const KeyValueConfig& cfg) {
    std::string kind = cfg.get("backend", "mock-linear");
    if (kind == "mock" || kind == "mock-linear" || kind == "mock-nonlinear") {
        models::MockBackendOptions opts;
        opts.latent = parse_shape(cfg.get("backend.latent", "4x4x2"));
        opts.image = parse_shape(cfg.get("backend.image", "16x16x3"));
        opts.text = parse_shape(cfg.get("backend.text", "2x4"));
        opts.steps = cfg.get_int("backend.T", cfg.get_int("T", 20));
        opts.sigma_min = cfg.get_double("backend.sigma_min", 0.01);
        opts.sigma_max = cfg.get_double("backend.sigma_max", 1.0);
        opts.seed = cfg.get_u64("backend.seed", 0x5eed);
        opts.z_gain = cfg.get_double("backend.z_gain", -0.35);
        opts.image_gain = cfg.get_double("backend.image_gain", 0.25);
        opts.text_gain = cfg.get_double("backend.text_gain", 0.15);
        opts.nonlinear = kind == "mock-nonlinear" || cfg.get_bool("backend.nonlinear", false);
        opts.invertible_pair = cfg.get_bool("backend.invertible", false);
        opts.uniform_z_weights = cfg.get_bool("backend.uniform_z", false);
        opts.image_weights_track_z = cfg.get_bool("backend.track_image", false);
        opts.encode_gain = cfg.get_double("backend.encode_gain", 1.0);
        opts.decode_gain = cfg.get_double("backend.decode_gain", 1.0);
        return std::make_shared<models::MockBackend>(opts);
    }
    throw ConfigError("unknown backend kind: " + kind +
                      " (real-weight backends plug in through the models::Backend interface)");
}

std::shared_ptr<models::Classifier> make_classifier(const std::string& spec) {
    auto colon = spec.find(':');
    std::string kind = colon == std::string::npos ? spec : spec.substr(0, colon);
    std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    if (kind == "linear") {
        require(!arg.empty(), "classifier spec linear:<path.json> needs a path");
        return std::make_shared<models::LinearClassifier>(models::LinearClassifier::load_json(arg));
    }
    throw ConfigError("unknown classifier spec: " + spec);
}

std::shared_ptr<perceptual::FeatureExtractor> make_phi(const std::string& spec) {
    auto colon = spec.find(':');
    std::string kind = colon == std::string::npos ? spec : spec.substr(0, colon);
    std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    if (kind == "identity") return std::make_shared<perceptual::IdentityFeatures>(1.0, false);
    if (kind == "identity-rms") return std::make_shared<perceptual::IdentityFeatures>(1.0, true);
    if (kind == "conv") {
        uint64_t seed = arg.empty() ? 7 : std::stoull(arg);
        return std::make_shared<perceptual::ConvFeatures>(perceptual::ConvFeatures::random_small(3, seed));
    }
    if (kind == "conv-json") {
        require(!arg.empty(), "phi spec conv-json:<path> needs a path");
        return std::make_shared<perceptual::ConvFeatures>(perceptual::ConvFeatures::load_json(arg));
    }
    throw ConfigError("unknown phi spec: " + spec);
}

baselines::DefenseAdapter make_defense(const std::string& spec) {
    if (spec == "none" || spec == "identity") return baselines::DefenseAdapter::identity();
    auto colon = spec.find(':');
    std::string kind = colon == std::string::npos ? spec : spec.substr(0, colon);
    if (kind == "gaussian") {
        double stddev = std::stod(spec.substr(colon + 1));
        return baselines::DefenseAdapter::additive_gaussian(stddev);
    }
    throw ConfigError("unknown defense spec: " + spec);
}

}  // namespace

Experiment Experiment::from_config(const KeyValueConfig& cfg) {
    Experiment exp;
    exp.attack_name = cfg.get("attack", "i2a");

    exp.attack_cfg.lambda = cfg.get_double("lambda", 100.0);
    exp.attack_cfg.gamma = cfg.get_double("gamma", 0.3);
    exp.attack_cfg.eta = cfg.get_double("eta", 0.1);
    exp.attack_cfg.T = cfg.get_int("T", 20);
    exp.attack_cfg.s_image = cfg.get_double("s_image", 1.5);
    exp.attack_cfg.s_text = cfg.get_double("s_text", 7.5);
    exp.attack_cfg.N = cfg.get_int("N", 200);
    exp.attack_cfg.proj_s_image_max = cfg.get_double("proj_s_image_max", 10.0);
    exp.attack_cfg.proj_s_image_step = cfg.get_double("proj_s_image_step", 0.2);
    exp.attack_cfg.proj_bisect_iters = cfg.get_int("proj_bisect_iters", 10);
    exp.attack_cfg.proj_s_text_max = cfg.get_double("proj_s_text_max", 20.0);
    exp.attack_cfg.optimize_alpha = cfg.get_bool("optimize_alpha", true);
    exp.attack_cfg.optimize_beta = cfg.get_bool("optimize_beta", true);

    exp.noise_cfg.epsilon = cfg.get_double("epsilon", 4.0 / 255.0);
    exp.noise_cfg.steps = cfg.get_int("steps", 100);
    exp.noise_cfg.step_size = cfg.get_double("step_size", 1.0 / 255.0);
    exp.noise_cfg.decay = cfg.get_double("decay", 1.0);

    exp.defense_spec = cfg.get("defense", "none");
    exp.eot_samples = cfg.get_int("eot_samples", 16);
    exp.adaptive_max_iters = cfg.get_int("adaptive_max_iters", 50);

    std::string dataset_path = cfg.get("dataset", "");
    require_config(!dataset_path.empty(), "config: dataset = <manifest.json> is required");
    exp.dataset = Dataset::load(dataset_path);
    if (cfg.has("resize")) {
        exp.dataset.resize_h = cfg.get_int("resize", 256);
        exp.dataset.resize_w = exp.dataset.resize_h;
    }

    std::string prompts = cfg.get("prompts", "builtin");
    for (const auto& p : split(prompts, ';')) {
        if (p == "builtin") {
            for (const auto& b : instructions::builtin_prompts()) exp.prompts.push_back(b.text);
        } else {
            exp.prompts.push_back(p);
        }
    }
    exp.instructions_cache_path = cfg.get("instructions_cache", "");
    if (cfg.has("prompts_file")) {
        std::ifstream pf(cfg.get("prompts_file", ""));
        if (!pf) throw InputError("cannot open prompts file");
        std::string line;
        while (std::getline(pf, line))
            if (!line.empty()) exp.prompts.push_back(line);
    }
    require_config(!exp.prompts.empty(), "config: no prompts configured");

    exp.backend = make_backend(cfg);
    exp.source_classifier = make_classifier(cfg.get("classifier", ""));
    exp.source_name = cfg.get("classifier_name", "source");
    std::string targets = cfg.get("targets", "");
    std::string target_names = cfg.get("target_names", "");
    if (!targets.empty()) {
        auto specs = split(targets, ',');
        auto names = split(target_names, ',');
        for (size_t i = 0; i < specs.size(); ++i) {
            exp.target_classifiers.push_back(make_classifier(specs[i]));
            exp.target_names.push_back(i < names.size() ? names[i]
                                                        : "target" + std::to_string(i));
        }
    }
    exp.phi = make_phi(cfg.get("phi", "identity-rms"));

    exp.seed = cfg.get_u64("seed", 0);
    exp.workers = cfg.get_int("workers", 1);
    exp.offline = cfg.get_bool("offline", false);
    exp.out_dir = cfg.get("out", "");
    return exp;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

// Non-shareable adapters force single-threaded execution; there is no
// per-worker factory to clone them from.
int effective_workers(const Experiment& exp) {
    bool shareable = exp.backend->shareable() && exp.source_classifier->shareable() &&
                     exp.phi->shareable();
    for (const auto& clf : exp.target_classifiers) shareable = shareable && clf->shareable();
    return shareable ? exp.workers : 1;
}

baselines::AttackFn resolve_attack(const Experiment& exp) {
    baselines::AttackFn fn = baselines::AttackRegistry::instance().get(exp.attack_name);
    if (exp.defense_spec != "none") {
        fn = baselines::adaptive(std::move(fn), make_defense(exp.defense_spec), exp.eot_samples,
                                 exp.adaptive_max_iters);
    }
    return fn;
}

void run_pool(int workers, int tasks, const std::function<void(int)>& body) {
    if (workers <= 1 || tasks <= 1) {
        for (int i = 0; i < tasks; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    int n = std::min(workers, tasks);
    pool.reserve(static_cast<size_t>(n));
    for (int w = 0; w < n; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= tasks) return;
                body(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

// Resolves the instruction text for a prompt label; "generated" pulls the
// per-image instruction from the cache.
std::string resolve_instruction(const DatasetItem& item, const std::string& prompt,
                                const instructions::InstructionCache* cache) {
    if (prompt != "generated") return prompt;
    if (cache) {
        auto entry = cache->get(item.image_id);
        if (entry && !entry->instruction.empty()) return entry->instruction;
    }
    throw InputError("no generated instruction cached for " + item.image_id +
                     " (run gen-instructions first)");
}

RunRecord execute_task(Experiment& exp, const baselines::AttackFn& attack_fn,
                       const DatasetItem& item, const std::string& prompt,
                       models::Classifier& source, const std::string& source_name,
                       const instructions::InstructionCache* cache, Tensor* adversarial_out) {
    RunRecord rec;
    rec.image_id = item.image_id;
    rec.prompt = prompt;
    rec.attack = exp.attack_name;
    rec.source_model = source_name;
    rec.target_model = source_name;
    rec.label = item.label;
    rec.seed = per_image_seed(exp.seed, item.image_id);
    auto start = std::chrono::steady_clock::now();
    try {
        Tensor x = exp.dataset.load_image(item);
        baselines::AttackRequest req;
        req.x = x;
        req.label = item.label;
        req.instruction = resolve_instruction(item, prompt, cache);
        req.classifier = &source;
        req.backend = exp.backend.get();
        req.phi = exp.phi.get();
        req.i2a = exp.attack_cfg;
        req.noise = exp.noise_cfg;
        req.seed = rec.seed;
        baselines::AttackReply rep = attack_fn(req);
        // Adaptive attacks report predictions through the defended model;
        // fall back to the raw source for plugins that leave it unset.
        rec.predicted =
            rep.predicted >= 0 ? rep.predicted : models::classify(source, rep.adversarial);
        rec.success = rec.predicted != item.label;
        rec.lpips = rep.distance;
        rec.constraint_met = rep.constraint_met;
        rec.iterations = rep.iterations;
        if (adversarial_out) *adversarial_out = rep.adversarial;
    } catch (const std::exception& e) {
        rec.error = e.what();
    }
    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

void write_outputs(const Experiment& exp, const RunOutput& out,
                   const std::vector<std::pair<std::string, Tensor>>& images) {
    if (exp.out_dir.empty()) return;
    fs::create_directories(exp.out_dir);
    write_records((fs::path(exp.out_dir) / "records.jsonl").string(), out.records);
    std::ofstream csv(fs::path(exp.out_dir) / "report.csv", std::ios::trunc);
    csv << out.report.to_csv();
    for (const auto& [name, img] : images) {
        fs::path p = fs::path(exp.out_dir) / name;
        fs::create_directories(p.parent_path());
        imageio::save_png(p.string(), img);
    }
}

std::unique_ptr<instructions::InstructionCache> load_prompt_cache(const Experiment& exp) {
    bool needed = std::find(exp.prompts.begin(), exp.prompts.end(), "generated") !=
                  exp.prompts.end();
    if (!needed || exp.instructions_cache_path.empty()) return nullptr;
    return std::make_unique<instructions::InstructionCache>(exp.instructions_cache_path);
}

}  // namespace

RunOutput evaluate_whitebox(Experiment& exp) {
    baselines::AttackFn attack_fn = resolve_attack(exp);
    std::unique_ptr<instructions::InstructionCache> cache = load_prompt_cache(exp);
    int n_items = static_cast<int>(exp.dataset.items.size());
    int n_prompts = static_cast<int>(exp.prompts.size());
    int tasks = n_items * n_prompts;
    RunOutput out;
    out.records.resize(static_cast<size_t>(tasks));
    std::vector<std::pair<std::string, Tensor>> images(static_cast<size_t>(tasks));

    run_pool(effective_workers(exp), tasks, [&](int idx) {
        int item_index = idx / n_prompts;
        int prompt_index = idx % n_prompts;
        const DatasetItem& item = exp.dataset.items[static_cast<size_t>(item_index)];
        const std::string& prompt = exp.prompts[static_cast<size_t>(prompt_index)];
        Tensor adv;
        RunRecord rec = execute_task(exp, attack_fn, item, prompt, *exp.source_classifier,
                                     exp.source_name, cache.get(), &adv);
        if (rec.error.empty())
            images[static_cast<size_t>(idx)] = {item.image_id + "__" + prompt_slug(prompt) + ".png",
                                                std::move(adv)};
        out.records[static_cast<size_t>(idx)] = std::move(rec);
    });

    out.any_errors = std::any_of(out.records.begin(), out.records.end(),
                                 [](const RunRecord& r) { return !r.error.empty(); });
    out.report = aggregate(out.records);
    for (ReportRow& row : out.report.rows) row.group = "whitebox";
    std::vector<std::pair<std::string, Tensor>> named;
    for (auto& p : images)
        if (!p.first.empty()) named.push_back(std::move(p));
    write_outputs(exp, out, named);
    return out;
}

RunOutput evaluate_transfer(Experiment& exp) {
    baselines::AttackFn attack_fn = resolve_attack(exp);
    std::unique_ptr<instructions::InstructionCache> cache = load_prompt_cache(exp);

    std::vector<std::shared_ptr<models::Classifier>> sources{exp.source_classifier};
    std::vector<std::string> source_names{exp.source_name};
    for (size_t i = 0; i < exp.target_classifiers.size(); ++i) {
        sources.push_back(exp.target_classifiers[i]);
        source_names.push_back(exp.target_names[i]);
    }
    int n_models = static_cast<int>(sources.size());
    int n_items = static_cast<int>(exp.dataset.items.size());
    int n_prompts = static_cast<int>(exp.prompts.size());
    int tasks = n_items * n_prompts * n_models;

    RunOutput out;
    out.records.resize(static_cast<size_t>(tasks) * n_models);
    std::vector<std::pair<std::string, Tensor>> images(static_cast<size_t>(tasks));

    run_pool(effective_workers(exp), tasks, [&](int idx) {
        int src = idx % n_models;
        int rest = idx / n_models;
        int prompt_index = rest % n_prompts;
        int item_index = rest / n_prompts;
        const DatasetItem& item = exp.dataset.items[static_cast<size_t>(item_index)];
        const std::string& prompt = exp.prompts[static_cast<size_t>(prompt_index)];
        Tensor adv;
        RunRecord crafted = execute_task(exp, attack_fn, item, prompt, *sources[static_cast<size_t>(src)],
                                         source_names[static_cast<size_t>(src)], cache.get(), &adv);
        if (crafted.error.empty())
            images[static_cast<size_t>(idx)] = {source_names[static_cast<size_t>(src)] + "/" +
                                                    item.image_id + "__" + prompt_slug(prompt) +
                                                    ".png",
                                                adv};
        for (int tgt = 0; tgt < n_models; ++tgt) {
            RunRecord rec = crafted;
            rec.target_model = source_names[static_cast<size_t>(tgt)];
            if (rec.error.empty()) {
                rec.predicted = models::classify(*sources[static_cast<size_t>(tgt)], adv);
                rec.success = rec.predicted != item.label;
            }
            out.records[static_cast<size_t>(idx) * n_models + tgt] = std::move(rec);
        }
    });

    out.any_errors = std::any_of(out.records.begin(), out.records.end(),
                                 [](const RunRecord& r) { return !r.error.empty(); });
    out.report = aggregate(out.records);
    for (ReportRow& row : out.report.rows) row.group = "transfer";
    std::vector<std::pair<std::string, Tensor>> named;
    for (auto& p : images)
        if (!p.first.empty()) named.push_back(std::move(p));
    write_outputs(exp, out, named);
    return out;
}

RunOutput ablate(Experiment& exp, const std::string& parameter,
                 const std::vector<std::string>& values, const FidFn& fid) {
    require(parameter == "lambda" || parameter == "gamma" || parameter == "alpha_beta",
            "ablate: parameter must be lambda, gamma or alpha_beta");
    require(!values.empty(), "ablate: no values given");

    RunOutput combined;
    std::string out_dir = exp.out_dir;
    exp.out_dir.clear();  // sweep points write nothing; the sweep writes once
    attack::AttackConfig base = exp.attack_cfg;

    for (const std::string& value : values) {
        exp.attack_cfg = base;
        std::string group = parameter + "=" + value;
        if (parameter == "lambda") {
            exp.attack_cfg.lambda = std::stod(value);
        } else if (parameter == "gamma") {
            exp.attack_cfg.gamma = std::stod(value);
        } else {
            if (value == "off" || value == "none") {
                exp.attack_cfg.optimize_alpha = false;
                exp.attack_cfg.optimize_beta = false;
            } else if (value == "alpha") {
                exp.attack_cfg.optimize_alpha = true;
                exp.attack_cfg.optimize_beta = false;
            } else if (value == "beta") {
                exp.attack_cfg.optimize_alpha = false;
                exp.attack_cfg.optimize_beta = true;
            } else if (value == "both") {
                exp.attack_cfg.optimize_alpha = true;
                exp.attack_cfg.optimize_beta = true;
            } else {
                throw InputError("ablate alpha_beta: value must be off, alpha, beta or both");
            }
        }
        RunOutput point = evaluate_whitebox(exp);
        std::optional<double> fid_value;
        if (fid) {
            std::vector<Tensor> clean, adv;
            for (const DatasetItem& item : exp.dataset.items)
                clean.push_back(exp.dataset.load_image(item));
            baselines::AttackFn attack_fn = resolve_attack(exp);
            for (const DatasetItem& item : exp.dataset.items) {
                baselines::AttackRequest req;
                req.x = exp.dataset.load_image(item);
                req.label = item.label;
                req.instruction = exp.prompts.front();
                req.classifier = exp.source_classifier.get();
                req.backend = exp.backend.get();
                req.phi = exp.phi.get();
                req.i2a = exp.attack_cfg;
                req.noise = exp.noise_cfg;
                req.seed = per_image_seed(exp.seed, item.image_id);
                adv.push_back(attack_fn(req).adversarial);
            }
            fid_value = fid(clean, adv);
        }
        for (RunRecord& r : point.records) combined.records.push_back(std::move(r));
        for (ReportRow row : point.report.rows) {
            row.group = group;
            row.fid = fid_value;
            combined.report.rows.push_back(std::move(row));
        }
        combined.any_errors = combined.any_errors || point.any_errors;
    }

    exp.attack_cfg = base;
    exp.out_dir = out_dir;
    if (!exp.out_dir.empty()) {
        fs::create_directories(exp.out_dir);
        write_records((fs::path(exp.out_dir) / "records.jsonl").string(), combined.records);
        std::ofstream csv(fs::path(exp.out_dir) / "report.csv", std::ios::trunc);
        csv << combined.report.to_csv();
    }
    return combined;
}

GenInstructionsOutput gen_instructions(Experiment& exp, const std::string& cache_path,
                                       instructions::CaptionClient* captioner,
                                       instructions::LlmClient* llm) {
    instructions::InstructionCache cache(cache_path);
    instructions::PromptTemplate tmpl = instructions::PromptTemplate::standard();
    std::atomic<int> generated{0}, from_cache{0}, errors{0};
    int tasks = static_cast<int>(exp.dataset.items.size());
    // exp.workers doubles as the in-flight request cap.
    run_pool(exp.workers, tasks, [&](int idx) {
        const DatasetItem& item = exp.dataset.items[static_cast<size_t>(idx)];
        if (cache.get(item.image_id)) {
            ++from_cache;
            return;
        }
        try {
            if (exp.offline || !llm)
                throw InputError("no instruction source for " + item.image_id +
                                 (exp.offline ? " (offline mode)" : " (no llm configured)"));
            std::string cap;
            if (item.caption) {
                cap = *item.caption;
            } else if (captioner) {
                cap = instructions::caption(exp.dataset.load_image(item), *captioner);
            } else {
                throw InputError("no caption available for " + item.image_id);
            }
            instructions::Instruction ins = instructions::generate_instruction(
                cap, item.category.value_or(""), *llm, tmpl);
            cache.put(item.image_id, {cap, ins.text});
            ++generated;
        } catch (const std::exception&) {
            ++errors;
        }
    });
    cache.save(cache_path);
    GenInstructionsOutput out;
    out.generated = generated.load();
    out.from_cache = from_cache.load();
    out.errors = errors.load();
    return out;
}

RunRecord run_single(Experiment& exp, const DatasetItem& item, const std::string& prompt,
                     models::Classifier& eval_classifier, const std::string& target_name,
                     Tensor* adversarial_out) {
    baselines::AttackFn attack_fn = resolve_attack(exp);
    std::unique_ptr<instructions::InstructionCache> cache = load_prompt_cache(exp);
    Tensor adv;
    RunRecord rec = execute_task(exp, attack_fn, item, prompt, *exp.source_classifier,
                                 exp.source_name, cache.get(), &adv);
    rec.target_model = target_name;
    if (rec.error.empty()) {
        rec.predicted = models::classify(eval_classifier, adv);
        rec.success = rec.predicted != item.label;
        if (adversarial_out) *adversarial_out = std::move(adv);
    }
    return rec;
}

}  // namespace i2a::harness
