#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "i2a/attack.hpp"
#include "i2a/baselines.hpp"
#include "i2a/instructions.hpp"
#include "i2a/models.hpp"
#include "i2a/perceptual.hpp"
#include "i2a/tensor.hpp"

namespace i2a::harness {

inline constexpr int kRecordSchemaVersion = 1;

struct DatasetItem {
    std::string image_id;
    std::string image_path;
    int label = 0;
    std::optional<std::string> caption;
    std::optional<std::string> category;
};

struct Dataset {
    std::vector<DatasetItem> items;
    std::vector<std::string> label_names;
    int resize_h = 256;
    int resize_w = 256;
    std::string base_dir;  // image paths resolve relative to the manifest

    static Dataset load(const std::string& manifest_path);
    void validate() const;  // unique ids, labels within the label map
    Tensor load_image(const DatasetItem& item) const;
};

struct RunRecord {
    std::string image_id;
    std::string prompt;
    std::string attack;
    std::string source_model;
    std::string target_model;
    int predicted = -1;
    int label = -1;
    bool success = false;
    double lpips = 0.0;
    bool constraint_met = true;
    int iterations = 0;
    double wall_time_s = 0.0;
    uint64_t seed = 0;
    std::string error;  // empty when the item ran cleanly
};

void write_records(const std::string& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_records(const std::string& path);

struct ReportRow {
    std::string group;   // e.g. "whitebox", "lambda=100"
    std::string prompt;  // "(all)" for aggregate rows
    std::string source_model;
    std::string target_model;
    int count = 0;
    double accuracy_pct = 0.0;
    double failure_pct = 0.0;
    double mean_lpips = 0.0;
    std::optional<double> fid;
};

struct ReportTable {
    std::vector<ReportRow> rows;
    std::string to_csv() const;
};

// Recomputes the table from records; the emitted report must equal this.
ReportTable aggregate(const std::vector<RunRecord>& records);

uint64_t per_image_seed(uint64_t global_seed, const std::string& image_id);
std::string prompt_slug(const std::string& prompt);

// Flat key = value configuration file (# starts a comment line).
class KeyValueConfig {
  public:
    static KeyValueConfig load(const std::string& path);
    static KeyValueConfig from_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    void set(const std::string& key, const std::string& value);

  private:
    std::map<std::string, std::string> values_;
};

// Everything a run needs: adapters, attack settings, dataset, prompts.
struct Experiment {
    std::string attack_name = "i2a";
    attack::AttackConfig attack_cfg;
    baselines::NoiseAttackConfig noise_cfg;

    std::string defense_spec = "none";  // none | gaussian:<stddev>
    int eot_samples = 16;
    int adaptive_max_iters = 50;

    Dataset dataset;
    // Prompt labels; the reserved label "generated" resolves per image from
    // the instruction cache.
    std::vector<std::string> prompts;
    std::string instructions_cache_path;

    std::shared_ptr<models::Backend> backend;
    std::shared_ptr<models::Classifier> source_classifier;
    std::string source_name = "source";
    std::vector<std::shared_ptr<models::Classifier>> target_classifiers;
    std::vector<std::string> target_names;

    std::shared_ptr<perceptual::FeatureExtractor> phi;

    uint64_t seed = 0;
    int workers = 1;
    bool offline = false;
    std::string out_dir;  // empty = no artifacts written

    // Builds adapters and dataset from a parsed config; overrides are CLI
    // flags (seed/out/workers/offline).
    static Experiment from_config(const KeyValueConfig& cfg);
};

struct RunOutput {
    std::vector<RunRecord> records;
    ReportTable report;
    bool any_errors = false;
};

RunOutput evaluate_whitebox(Experiment& exp);
RunOutput evaluate_transfer(Experiment& exp);

using FidFn = std::function<double(const std::vector<Tensor>& clean,
                                   const std::vector<Tensor>& adversarial)>;

// parameter: lambda | gamma | alpha_beta. Values are numbers for the former
// two and off/beta/alpha/both switches for the latter.
RunOutput ablate(Experiment& exp, const std::string& parameter,
                 const std::vector<std::string>& values, const FidFn& fid = nullptr);

struct GenInstructionsOutput {
    int generated = 0;
    int from_cache = 0;
    int errors = 0;
};

// Captions + instruction generation over the dataset, persisted to the cache
// file. Offline mode uses dataset metadata and the cache only and performs
// zero network calls.
GenInstructionsOutput gen_instructions(Experiment& exp, const std::string& cache_path,
                                       instructions::CaptionClient* captioner,
                                       instructions::LlmClient* llm);

// Attack a single (image, prompt) pair; used by the CLI attack/project paths.
RunRecord run_single(Experiment& exp, const DatasetItem& item, const std::string& prompt,
                     models::Classifier& eval_classifier, const std::string& target_name,
                     Tensor* adversarial_out = nullptr);

}  // namespace i2a::harness
