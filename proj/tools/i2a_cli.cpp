#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "i2a/harness.hpp"
#include "i2a/image_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace i2a;

namespace {

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    int workers = 0;
    bool offline = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "flat key = value config file")->required();
    cmd->add_option("--seed", flags.seed, "global seed override")
        ->each([&flags](const std::string&) { flags.seed_set = true; });
    cmd->add_option("--out", flags.out_dir, "output directory");
    cmd->add_option("--workers", flags.workers, "worker pool size");
    cmd->add_flag("--offline", flags.offline, "no network calls");
}

harness::Experiment build_experiment(const CommonFlags& flags) {
    harness::KeyValueConfig cfg = harness::KeyValueConfig::load(flags.config_path);
    harness::Experiment exp = harness::Experiment::from_config(cfg);
    if (flags.seed_set) exp.seed = flags.seed;
    if (!flags.out_dir.empty()) exp.out_dir = flags.out_dir;
    if (flags.workers > 0) exp.workers = flags.workers;
    if (flags.offline) exp.offline = true;
    return exp;
}

void print_report(const harness::ReportTable& report) {
    std::cout << report.to_csv();
}

sampler::GuidanceFactors load_factors(const std::string& path, const Shape& latent) {
    if (path.empty()) return sampler::GuidanceFactors::all_ones(latent);
    std::ifstream f(path);
    if (!f) throw InputError("cannot open factors file: " + path);
    nlohmann::json j;
    f >> j;
    auto a = j.at("alpha").get<std::vector<double>>();
    auto b = j.at("beta").get<std::vector<double>>();
    sampler::GuidanceFactors out{Tensor(latent, std::move(a)), Tensor(latent, std::move(b))};
    out.validate();
    return out;
}

const harness::DatasetItem& find_item(const harness::Dataset& ds, const std::string& id) {
    if (id.empty()) {
        require(!ds.items.empty(), "dataset is empty");
        return ds.items.front();
    }
    for (const auto& item : ds.items)
        if (item.image_id == id) return item;
    throw InputError("image id not found in dataset: " + id);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"language-guided semantic adversarial attacks on image classifiers"};
    app.require_subcommand(1);

    CommonFlags attack_flags, eval_flags, transfer_flags, ablate_flags, gen_flags, project_flags;

    auto* cmd_attack = app.add_subcommand("attack", "attack a single image");
    add_common(cmd_attack, attack_flags);
    std::string attack_image_id, attack_prompt;
    cmd_attack->add_option("--image-id", attack_image_id, "dataset item to attack (default: first)");
    cmd_attack->add_option("--prompt", attack_prompt, "edit instruction (default: first configured)");

    auto* cmd_eval = app.add_subcommand("evaluate", "white-box evaluation over the dataset");
    add_common(cmd_eval, eval_flags);

    auto* cmd_transfer = app.add_subcommand("transfer", "cross-model transferability matrix");
    add_common(cmd_transfer, transfer_flags);

    auto* cmd_ablate = app.add_subcommand("ablate", "sweep lambda, gamma or the factor switches");
    add_common(cmd_ablate, ablate_flags);
    std::string ablate_parameter;
    std::string ablate_values;
    cmd_ablate->add_option("--parameter", ablate_parameter, "lambda | gamma | alpha_beta");
    cmd_ablate->add_option("--values", ablate_values, "comma-separated sweep values");

    auto* cmd_gen = app.add_subcommand("gen-instructions", "caption + instruction generation");
    add_common(cmd_gen, gen_flags);
    std::string cache_path;
    cmd_gen->add_option("--cache", cache_path, "instruction cache file (json)");

    auto* cmd_project = app.add_subcommand("project", "standalone perceptual projection");
    add_common(cmd_project, project_flags);
    std::string project_image_id, project_prompt, factors_path;
    cmd_project->add_option("--image-id", project_image_id, "dataset item (default: first)");
    cmd_project->add_option("--prompt", project_prompt, "edit instruction (default: first configured)");
    cmd_project->add_option("--factors", factors_path, "json file with alpha/beta arrays (default: all ones)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_attack->parsed()) {
            harness::Experiment exp = build_experiment(attack_flags);
            const harness::DatasetItem& item = find_item(exp.dataset, attack_image_id);
            std::string prompt = attack_prompt.empty() ? exp.prompts.front() : attack_prompt;
            Tensor adv;
            harness::RunRecord rec = harness::run_single(exp, item, prompt, *exp.source_classifier,
                                                         exp.source_name, &adv);
            if (!rec.error.empty()) {
                std::cerr << "error: " << rec.error << "\n";
                return 1;
            }
            std::cout << "image=" << rec.image_id << " prompt=\"" << prompt << "\""
                      << " success=" << (rec.success ? "yes" : "no") << " predicted=" << rec.predicted
                      << " lpips=" << rec.lpips
                      << " constraint_met=" << (rec.constraint_met ? "yes" : "no")
                      << " iterations=" << rec.iterations << "\n";
            if (!exp.out_dir.empty()) {
                fs::create_directories(exp.out_dir);
                fs::path png = fs::path(exp.out_dir) /
                               (rec.image_id + "__" + harness::prompt_slug(prompt) + ".png");
                imageio::save_png(png.string(), adv);
                harness::write_records((fs::path(exp.out_dir) / "records.jsonl").string(), {rec});
                std::cout << "saved " << png.string() << "\n";
            }
            return 0;
        }
        if (cmd_eval->parsed()) {
            harness::Experiment exp = build_experiment(eval_flags);
            harness::RunOutput out = harness::evaluate_whitebox(exp);
            print_report(out.report);
            return out.any_errors ? 1 : 0;
        }
        if (cmd_transfer->parsed()) {
            harness::Experiment exp = build_experiment(transfer_flags);
            harness::RunOutput out = harness::evaluate_transfer(exp);
            print_report(out.report);
            return out.any_errors ? 1 : 0;
        }
        if (cmd_ablate->parsed()) {
            harness::Experiment exp = build_experiment(ablate_flags);
            harness::KeyValueConfig cfg = harness::KeyValueConfig::load(ablate_flags.config_path);
            std::string parameter =
                ablate_parameter.empty() ? cfg.get("ablate_parameter", "lambda") : ablate_parameter;
            std::string values_text =
                ablate_values.empty() ? cfg.get("ablate_values", "") : ablate_values;
            require(!values_text.empty(), "ablate: provide --values or ablate_values in the config");
            std::vector<std::string> values;
            std::istringstream in(values_text);
            std::string part;
            while (std::getline(in, part, ','))
                if (!part.empty()) values.push_back(part);
            harness::RunOutput out = harness::ablate(exp, parameter, values);
            print_report(out.report);
            return out.any_errors ? 1 : 0;
        }
        if (cmd_gen->parsed()) {
            harness::Experiment exp = build_experiment(gen_flags);
            harness::KeyValueConfig cfg = harness::KeyValueConfig::load(gen_flags.config_path);
            std::string cache = cache_path.empty() ? cfg.get("instructions_cache", "instructions.json")
                                                   : cache_path;
            std::unique_ptr<instructions::LlmClient> llm;
            std::unique_ptr<instructions::CaptionClient> captioner;
            if (!exp.offline) {
                if (cfg.has("llm.endpoint")) {
                    instructions::HttpClientConfig c;
                    c.endpoint = cfg.get("llm.endpoint", "");
                    c.path = cfg.get("llm.path", "/v1/chat/completions");
                    c.model = cfg.get("llm.model", "");
                    c.api_key_env = "I2A_LLM_API_KEY";
                    llm = std::make_unique<instructions::HttpLlmClient>(c);
                }
                if (cfg.has("caption.endpoint")) {
                    instructions::HttpClientConfig c;
                    c.endpoint = cfg.get("caption.endpoint", "");
                    c.path = cfg.get("caption.path", "/v1/captions");
                    c.model = cfg.get("caption.model", "");
                    c.api_key_env = "I2A_CAPTION_API_KEY";
                    captioner = std::make_unique<instructions::HttpCaptionClient>(c);
                }
            }
            harness::GenInstructionsOutput out =
                harness::gen_instructions(exp, cache, captioner.get(), llm.get());
            std::cout << "generated=" << out.generated << " cached=" << out.from_cache
                      << " errors=" << out.errors << " cache_file=" << cache << "\n";
            return out.errors > 0 ? 1 : 0;
        }
        if (cmd_project->parsed()) {
            harness::Experiment exp = build_experiment(project_flags);
            const harness::DatasetItem& item = find_item(exp.dataset, project_image_id);
            std::string prompt = project_prompt.empty() ? exp.prompts.front() : project_prompt;
            Tensor x = exp.dataset.load_image(item);
            sampler::GuidanceFactors factors =
                load_factors(factors_path, exp.backend->latent_shape());
            attack::AttackConfig cfg = exp.attack_cfg;
            cfg.seed = harness::per_image_seed(exp.seed, item.image_id);
            Tensor z_T = models::draw_initial_latent(exp.backend->latent_shape(),
                                                     exp.backend->schedule().sigmas.back(), cfg.seed);
            attack::ProjectionResult res = attack::project(x, z_T, factors, prompt, *exp.backend,
                                                           *exp.phi, cfg.gamma, cfg);
            if (!res.feasible) {
                std::cout << "projection failed: no feasible s_image <= " << cfg.proj_s_image_max
                          << "\n";
                return 1;
            }
            std::cout << "s_image=" << res.s_image << " s_text=" << res.s_text
                      << " lpips=" << res.distance << "\n";
            if (!exp.out_dir.empty()) {
                fs::create_directories(exp.out_dir);
                fs::path png = fs::path(exp.out_dir) /
                               (item.image_id + "__" + harness::prompt_slug(prompt) + ".png");
                imageio::save_png(png.string(), res.image);
                std::cout << "saved " << png.string() << "\n";
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
