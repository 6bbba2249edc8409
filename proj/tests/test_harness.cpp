#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "i2a/harness.hpp"
#include "i2a/image_io.hpp"
#include "json.hpp"

using namespace i2a;
using namespace i2a::harness;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Writes images as PNGs plus a manifest; returns the manifest path.
std::string write_dataset(const fs::path& dir, const std::vector<Tensor>& images,
                          const std::vector<int>& labels, int resize,
                          const std::vector<std::string>& captions = {}) {
    nlohmann::json j;
    j["resize"] = {resize, resize};
    j["labels"] = {"class0", "class1", "class2"};
    nlohmann::json items = nlohmann::json::array();
    for (size_t i = 0; i < images.size(); ++i) {
        std::string name = "img" + std::to_string(i);
        imageio::save_png((dir / (name + ".png")).string(), images[i]);
        nlohmann::json item;
        item["id"] = name;
        item["path"] = name + ".png";
        item["label"] = labels[i];
        if (i < captions.size()) item["caption"] = captions[i];
        items.push_back(std::move(item));
    }
    j["items"] = std::move(items);
    std::string manifest = (dir / "dataset.json").string();
    std::ofstream f(manifest);
    f << j.dump(2);
    return manifest;
}

Experiment efficacy_experiment(const fs::path& dir, int n_images, const std::string& attack_name,
                               int workers = 1) {
    fixtures::EfficacyScene scene = fixtures::EfficacyScene::make(n_images);
    Experiment exp;
    exp.attack_name = attack_name;
    exp.attack_cfg = scene.attack_cfg;
    exp.dataset = Dataset::load(write_dataset(dir, scene.scene.images, scene.scene.labels, 16));
    exp.prompts = {"make it in snow"};
    exp.backend = scene.backend;
    exp.source_classifier = scene.scene.classifier;
    exp.source_name = "toy";
    exp.phi = scene.phi;
    exp.seed = 4242;
    exp.workers = workers;
    return exp;
}

double accuracy_of(const RunOutput& out, const std::string& prompt) {
    for (const ReportRow& row : out.report.rows)
        if (row.prompt == prompt) return row.accuracy_pct;
    FAIL("missing report row for prompt " << prompt);
    return -1.0;
}

}  // namespace

TEST_CASE("flat key=value configs parse with comments and typed accessors") {
    KeyValueConfig cfg = KeyValueConfig::from_string(
        "# a comment\n"
        "lambda = 100\n"
        "attack = i2a\n"
        "offline = true\n"
        "workers=3\n"
        "\n"
        "gamma = 0.25\n");
    CHECK(cfg.get_double("lambda", 0.0) == 100.0);
    CHECK(cfg.get("attack", "") == "i2a");
    CHECK(cfg.get_bool("offline", false));
    CHECK(cfg.get_int("workers", 1) == 3);
    CHECK(cfg.get_double("gamma", 0.0) == 0.25);
    CHECK(cfg.get_int("missing", 7) == 7);
    CHECK_THROWS_AS(KeyValueConfig::from_string("just some text\n"), ParseError);
    CHECK_THROWS_AS(cfg.get_int("attack", 0), ParseError);
}

TEST_CASE("prompt slugs are filesystem-friendly") {
    CHECK(prompt_slug("make it a vintage photo") == "make-it-a-vintage-photo");
    CHECK(prompt_slug("Make it RAIN!  ") == "make-it-rain");
    CHECK(prompt_slug("***") == "prompt");
}

TEST_CASE("per-image seeds are stable and distinct") {
    CHECK(per_image_seed(1, "img0") == per_image_seed(1, "img0"));
    CHECK(per_image_seed(1, "img0") != per_image_seed(1, "img1"));
    CHECK(per_image_seed(1, "img0") != per_image_seed(2, "img0"));
}

TEST_CASE("accuracy aggregation: 4 images with 3 surviving attacks is 75%") {
    std::vector<RunRecord> records;
    for (int i = 0; i < 4; ++i) {
        RunRecord r;
        r.image_id = "img" + std::to_string(i);
        r.prompt = "p";
        r.attack = "x";
        r.source_model = "m";
        r.target_model = "m";
        r.success = i == 3;  // one flipped
        r.constraint_met = i != 2;
        r.lpips = 0.1 * i;
        records.push_back(r);
    }
    ReportTable table = aggregate(records);
    REQUIRE(table.rows.size() == 2);  // per-prompt row + (all) row
    for (const ReportRow& row : table.rows) {
        CHECK(row.count == 4);
        CHECK(row.accuracy_pct == doctest::Approx(75.0));
        CHECK(row.failure_pct == doctest::Approx(25.0));
        CHECK(row.mean_lpips == doctest::Approx(0.15));
    }
}

TEST_CASE("records round-trip through jsonl and aggregates match exactly") {
    fs::path dir = fresh_dir("i2a_records_rt");
    Experiment exp = efficacy_experiment(dir, 9, "i2a");
    RunOutput out = evaluate_whitebox(exp);
    std::string path = (dir / "records.jsonl").string();
    write_records(path, out.records);
    std::vector<RunRecord> back = read_records(path);
    REQUIRE(back.size() == out.records.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].image_id == out.records[i].image_id);
        CHECK(back[i].predicted == out.records[i].predicted);
        CHECK(back[i].success == out.records[i].success);
        CHECK(back[i].lpips == out.records[i].lpips);
        CHECK(back[i].constraint_met == out.records[i].constraint_met);
        CHECK(back[i].seed == out.records[i].seed);
    }
    ReportTable re = aggregate(back);
    REQUIRE(re.rows.size() == out.report.rows.size());
    for (size_t i = 0; i < re.rows.size(); ++i) {
        CHECK(re.rows[i].accuracy_pct == out.report.rows[i].accuracy_pct);
        CHECK(re.rows[i].failure_pct == out.report.rows[i].failure_pct);
        CHECK(re.rows[i].mean_lpips == out.report.rows[i].mean_lpips);
    }
    CHECK_THROWS_AS(read_records((dir / "missing.jsonl").string()), InputError);

    std::ofstream bad((dir / "bad.jsonl").string());
    bad << "{\"kind\":\"i2a-run-records\",\"schema_version\":99}\n";
    bad.close();
    CHECK_THROWS_AS(read_records((dir / "bad.jsonl").string()), ParseError);
}

TEST_CASE("constraint accounting holds on every record") {
    fs::path dir = fresh_dir("i2a_constraint");
    Experiment exp = efficacy_experiment(dir, 9, "i2a");
    exp.attack_cfg.gamma = 0.22;  // tight budget: some records should project or fail
    RunOutput out = evaluate_whitebox(exp);
    int violations = 0;
    for (const RunRecord& r : out.records) {
        REQUIRE(r.error.empty());
        CHECK(r.constraint_met == (r.lpips <= exp.attack_cfg.gamma + attack::kConstraintTol));
        if (!r.constraint_met) ++violations;
    }
    double expected_failure = 100.0 * violations / static_cast<double>(out.records.size());
    for (const ReportRow& row : out.report.rows)
        CHECK(row.failure_pct == doctest::Approx(expected_failure));
}

TEST_CASE("the identity attack reproduces clean accuracy") {
    fs::path dir = fresh_dir("i2a_none");
    Experiment exp = efficacy_experiment(dir, 9, "none");
    RunOutput out = evaluate_whitebox(exp);
    int correct = 0;
    for (const DatasetItem& item : exp.dataset.items) {
        Tensor x = exp.dataset.load_image(item);
        if (models::classify(*exp.source_classifier, x) == item.label) ++correct;
    }
    double clean = 100.0 * correct / static_cast<double>(exp.dataset.items.size());
    CHECK(accuracy_of(out, "(all)") == doctest::Approx(clean));
}

TEST_CASE("white-box evaluation matches an independent per-item recomputation") {
    fs::path dir = fresh_dir("i2a_whitebox");
    Experiment exp = efficacy_experiment(dir, 12, "i2a");
    RunOutput out = evaluate_whitebox(exp);
    CHECK(!out.any_errors);
    REQUIRE(out.records.size() == 12);

    int correct = 0;
    for (const DatasetItem& item : exp.dataset.items) {
        Tensor x = exp.dataset.load_image(item);
        attack::AttackConfig cfg = exp.attack_cfg;
        cfg.seed = per_image_seed(exp.seed, item.image_id);
        attack::AttackResult res = attack::i2a_attack(x, "make it in snow", item.label,
                                                      *exp.source_classifier, *exp.backend,
                                                      *exp.phi, cfg);
        if (!res.success) ++correct;
    }
    double expected = 100.0 * correct / 12.0;
    CHECK(accuracy_of(out, "(all)") == doctest::Approx(expected));
}

TEST_CASE("two identical evaluations produce identical records modulo wall time") {
    fs::path dir = fresh_dir("i2a_determinism");
    Experiment exp = efficacy_experiment(dir, 8, "i2a", 2);
    RunOutput a = evaluate_whitebox(exp);
    exp.workers = 1;  // scheduling must not affect results
    RunOutput b = evaluate_whitebox(exp);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].image_id == b.records[i].image_id);
        CHECK(a.records[i].predicted == b.records[i].predicted);
        CHECK(a.records[i].success == b.records[i].success);
        CHECK(a.records[i].lpips == b.records[i].lpips);
        CHECK(a.records[i].constraint_met == b.records[i].constraint_met);
        CHECK(a.records[i].iterations == b.records[i].iterations);
        CHECK(a.records[i].seed == b.records[i].seed);
    }
}

TEST_CASE("evaluation writes the named artifacts") {
    fs::path dir = fresh_dir("i2a_artifacts");
    fs::path out_dir = dir / "out";
    Experiment exp = efficacy_experiment(dir, 3, "i2a");
    exp.out_dir = out_dir.string();
    evaluate_whitebox(exp);
    CHECK(fs::exists(out_dir / "records.jsonl"));
    CHECK(fs::exists(out_dir / "report.csv"));
    CHECK(fs::exists(out_dir / "img0__make-it-in-snow.png"));
    CHECK(fs::exists(out_dir / "img2__make-it-in-snow.png"));
    std::vector<RunRecord> persisted = read_records((out_dir / "records.jsonl").string());
    CHECK(persisted.size() == 3);
}

TEST_CASE("errors are recorded per item while the run continues") {
    fs::path dir = fresh_dir("i2a_errors");
    Experiment exp = efficacy_experiment(dir, 4, "i2a");
    fs::remove(dir / "img1.png");  // break one item
    RunOutput out = evaluate_whitebox(exp);
    CHECK(out.any_errors);
    int errored = 0, clean = 0;
    for (const RunRecord& r : out.records)
        (r.error.empty() ? clean : errored) += 1;
    CHECK(errored == 1);
    CHECK(clean == 3);
    // Errored items are excluded from aggregates.
    for (const ReportRow& row : out.report.rows) CHECK(row.count == 3);
}

TEST_CASE("transfer with the source as its only target equals white-box") {
    fs::path dir = fresh_dir("i2a_transfer1");
    Experiment exp = efficacy_experiment(dir, 8, "i2a");
    RunOutput white = evaluate_whitebox(exp);
    RunOutput transfer = evaluate_transfer(exp);  // no targets: 1x1 matrix
    REQUIRE(transfer.records.size() == white.records.size());
    CHECK(accuracy_of(transfer, "(all)") == doctest::Approx(accuracy_of(white, "(all)")));
}

TEST_CASE("transfer between identical classifiers is a symmetric matrix with equal entries") {
    fs::path dir = fresh_dir("i2a_transfer2");
    Experiment exp = efficacy_experiment(dir, 6, "i2a");
    exp.target_classifiers = {exp.source_classifier};
    exp.target_names = {"copy"};
    RunOutput out = evaluate_transfer(exp);
    // 6 items x 1 prompt x 2 sources x 2 targets
    REQUIRE(out.records.size() == 24);
    std::map<std::pair<std::string, std::string>, double> acc;
    for (const ReportRow& row : out.report.rows)
        if (row.prompt == "(all)") acc[{row.source_model, row.target_model}] = row.accuracy_pct;
    REQUIRE(acc.size() == 4);
    double first = acc.begin()->second;
    for (const auto& [key, v] : acc) CHECK(v == doctest::Approx(first));
}

TEST_CASE("transfer across jittered shared-feature models: off-diagonal >= diagonal per row") {
    fs::path dir = fresh_dir("i2a_transfer3");
    fixtures::EfficacyScene scene = fixtures::EfficacyScene::make(12);

    // Three classifiers sharing the trained feature structure, with small
    // independent jitter so transfer is imperfect but effective.
    std::vector<std::shared_ptr<models::Classifier>> clfs;
    Rng rng(31337);
    for (int k = 0; k < 3; ++k) {
        Tensor w = scene.scene.classifier->weights();
        Tensor b = scene.scene.classifier->bias();
        for (double& v : w.data) v += 0.02 * rng.gaussian() * std::abs(v);
        clfs.push_back(std::make_shared<models::LinearClassifier>(std::move(w), std::move(b)));
    }

    Experiment exp;
    exp.attack_name = "pgd";
    exp.noise_cfg.steps = 30;
    exp.dataset = Dataset::load(write_dataset(dir, scene.scene.images, scene.scene.labels, 16));
    exp.prompts = {"-"};
    exp.backend = scene.backend;
    exp.phi = scene.phi;
    exp.source_classifier = clfs[0];
    exp.source_name = "m0";
    exp.target_classifiers = {clfs[1], clfs[2]};
    exp.target_names = {"m1", "m2"};
    exp.seed = 7;
    RunOutput out = evaluate_transfer(exp);

    std::vector<std::string> names{"m0", "m1", "m2"};
    std::map<std::pair<std::string, std::string>, double> acc;
    for (const ReportRow& row : out.report.rows)
        if (row.prompt == "(all)") acc[{row.source_model, row.target_model}] = row.accuracy_pct;

    // Independent enumeration of every matrix entry.
    std::vector<std::shared_ptr<models::Classifier>> all{clfs[0], clfs[1], clfs[2]};
    for (int src = 0; src < 3; ++src) {
        for (int tgt = 0; tgt < 3; ++tgt) {
            int correct = 0;
            for (const DatasetItem& item : exp.dataset.items) {
                Tensor x = exp.dataset.load_image(item);
                baselines::NoiseAttackConfig cfg = exp.noise_cfg;
                Tensor adv = baselines::pgd(x, item.label, *all[static_cast<size_t>(src)], cfg);
                if (models::classify(*all[static_cast<size_t>(tgt)], adv) == item.label) ++correct;
            }
            double expected = 100.0 * correct / static_cast<double>(exp.dataset.items.size());
            CHECK(acc[{names[static_cast<size_t>(src)], names[static_cast<size_t>(tgt)]}] ==
                  doctest::Approx(expected));
        }
    }
    for (int src = 0; src < 3; ++src) {
        double diag = acc[{names[static_cast<size_t>(src)], names[static_cast<size_t>(src)]}];
        for (int tgt = 0; tgt < 3; ++tgt)
            CHECK(acc[{names[static_cast<size_t>(src)], names[static_cast<size_t>(tgt)]}] >=
                  diag - 1e-9);
    }
}

TEST_CASE("the factors-off ablation row equals benign editing accuracy") {
    fs::path dir = fresh_dir("i2a_ablate_ab");
    Experiment exp = efficacy_experiment(dir, 9, "i2a");
    RunOutput out = ablate(exp, "alpha_beta", {"off", "both"});

    // Independent benign-editing loop over the classifier-free guided path.
    int correct = 0;
    for (const DatasetItem& item : exp.dataset.items) {
        Tensor x = exp.dataset.load_image(item);
        uint64_t seed = per_image_seed(exp.seed, item.image_id);
        sampler::ConditionPair cond = exp.backend->condition(x, "make it in snow");
        Tensor z_T = models::draw_initial_latent(exp.backend->latent_shape(),
                                                 exp.backend->schedule().sigmas.back(), seed);
        sampler::NoiseSequence noise = sampler::NoiseSequence::draw(
            exp.backend->latent_shape(), exp.backend->schedule().steps(), seed);
        Tensor benign = exp.backend->decode(
            sampler::sample_cfg(exp.backend->denoiser(), z_T, cond,
                                {exp.attack_cfg.s_image, exp.attack_cfg.s_text},
                                exp.backend->schedule(), noise));
        if (models::classify(*exp.source_classifier, benign) == item.label) ++correct;
    }
    double benign_acc = 100.0 * correct / static_cast<double>(exp.dataset.items.size());

    double off_acc = -1.0, both_acc = -1.0;
    for (const ReportRow& row : out.report.rows) {
        if (row.prompt != "(all)") continue;
        if (row.group == "alpha_beta=off") off_acc = row.accuracy_pct;
        if (row.group == "alpha_beta=both") both_acc = row.accuracy_pct;
    }
    CHECK(off_acc == doctest::Approx(benign_acc));
    CHECK(both_acc <= off_acc);
}

TEST_CASE("failure rate is monotonically non-increasing in lambda on the monotone probe") {
    fs::path dir = fresh_dir("i2a_ablate_lambda");
    fixtures::ScaleProbe probe = fixtures::ScaleProbe::make(0.05, 0.1, 0.26, true);

    std::vector<Tensor> images(3, probe.clean_image);
    std::vector<int> labels{0, 0, 0};
    Experiment exp;
    exp.attack_name = "i2a";
    exp.attack_cfg.gamma = 0.3;
    exp.attack_cfg.eta = 0.1;
    exp.attack_cfg.T = 1;
    exp.attack_cfg.N = 15;
    exp.dataset = Dataset::load(write_dataset(dir, images, labels, 1));
    exp.prompts = {"edit"};
    exp.backend = probe.backend;
    exp.source_classifier =
        std::make_shared<models::LinearClassifier>(Tensor({2, 1}, {0.0, 2.0}), Tensor({2}, {0.0, 0.0}));
    exp.phi = std::make_shared<fixtures::HingeFeatures>();
    exp.seed = 55;

    std::vector<std::string> lambdas{"0.01", "100", "500"};
    RunOutput out = ablate(exp, "lambda", lambdas);

    std::map<std::string, double> failure;
    for (const ReportRow& row : out.report.rows)
        if (row.prompt == "(all)") failure[row.group] = row.failure_pct;
    REQUIRE(failure.size() == 3);

    // Brute-force sweep: run the attack directly at each lambda.
    for (const std::string& lam : lambdas) {
        int violations = 0;
        for (const DatasetItem& item : exp.dataset.items) {
            Tensor x = exp.dataset.load_image(item);
            attack::AttackConfig cfg = exp.attack_cfg;
            cfg.lambda = std::stod(lam);
            cfg.seed = per_image_seed(exp.seed, item.image_id);
            attack::AttackResult res = attack::i2a_attack(x, "edit", item.label,
                                                          *exp.source_classifier, *exp.backend,
                                                          *exp.phi, cfg);
            if (!res.constraint_met) ++violations;
        }
        double expected = 100.0 * violations / 3.0;
        CHECK(failure["lambda=" + lam] == doctest::Approx(expected));
    }

    CHECK(failure["lambda=0.01"] >= failure["lambda=100"]);
    CHECK(failure["lambda=100"] >= failure["lambda=500"]);
    CHECK(failure["lambda=0.01"] == doctest::Approx(100.0));
    CHECK(failure["lambda=500"] == doctest::Approx(0.0));
}

namespace {

struct CountingLlm : instructions::LlmClient {
    int calls = 0;
    std::string complete(const std::string&) override {
        ++calls;
        return "make it glow";
    }
};

struct CountingCaptioner : instructions::CaptionClient {
    int calls = 0;
    std::string caption_image(const Tensor&) override {
        ++calls;
        return "a colorful square";
    }
};

}  // namespace

TEST_CASE("offline instruction generation performs zero client calls") {
    fs::path dir = fresh_dir("i2a_gen_offline");
    fixtures::EfficacyScene scene = fixtures::EfficacyScene::make(4);
    Experiment exp;
    exp.dataset = Dataset::load(write_dataset(dir, scene.scene.images, scene.scene.labels, 16));
    exp.offline = true;
    CountingLlm llm;
    CountingCaptioner captioner;
    GenInstructionsOutput out =
        gen_instructions(exp, (dir / "cache.json").string(), &captioner, &llm);
    CHECK(llm.calls == 0);
    CHECK(captioner.calls == 0);
    CHECK(out.generated == 0);
    CHECK(out.errors == 4);  // nothing cached, no instruction source offline
}

TEST_CASE("online instruction generation fills the cache and reruns hit it") {
    fs::path dir = fresh_dir("i2a_gen_online");
    fixtures::EfficacyScene scene = fixtures::EfficacyScene::make(3);
    std::vector<std::string> captions{"a red square", "a green square"};  // third uses captioner
    Experiment exp;
    exp.dataset =
        Dataset::load(write_dataset(dir, scene.scene.images, scene.scene.labels, 16, captions));
    std::string cache_path = (dir / "cache.json").string();
    CountingLlm llm;
    CountingCaptioner captioner;
    GenInstructionsOutput first = gen_instructions(exp, cache_path, &captioner, &llm);
    CHECK(first.generated == 3);
    CHECK(first.errors == 0);
    CHECK(llm.calls == 3);
    CHECK(captioner.calls == 1);  // only the item without metadata caption

    CountingLlm llm2;
    CountingCaptioner captioner2;
    GenInstructionsOutput second = gen_instructions(exp, cache_path, &captioner2, &llm2);
    CHECK(second.from_cache == 3);
    CHECK(llm2.calls == 0);
    CHECK(captioner2.calls == 0);

    instructions::InstructionCache cache(cache_path);
    REQUIRE(cache.get("img0").has_value());
    CHECK(cache.get("img0")->instruction == "make it glow");
}

TEST_CASE("experiments build from a flat config file") {
    fs::path dir = fresh_dir("i2a_from_config");
    fixtures::EfficacyScene scene = fixtures::EfficacyScene::make(4);
    std::string manifest = write_dataset(dir, scene.scene.images, scene.scene.labels, 16);
    std::string clf_path = (dir / "clf.json").string();
    scene.scene.classifier->save_json(clf_path);

    std::string config_path = (dir / "run.conf").string();
    {
        std::ofstream f(config_path);
        f << "attack = i2a\n"
          << "lambda = 100\n"
          << "gamma = 0.3\n"
          << "eta = 0.1\n"
          << "T = 3\n"
          << "N = 8\n"
          << "dataset = " << manifest << "\n"
          << "prompts = make it in snow\n"
          << "backend = mock-linear\n"
          << "backend.latent = 16x16x3\n"
          << "backend.image = 16x16x3\n"
          << "backend.T = 3\n"
          << "backend.invertible = true\n"
          << "classifier = linear:" << clf_path << "\n"
          << "phi = identity-rms\n"
          << "seed = 11\n"
          << "workers = 2\n";
    }
    KeyValueConfig cfg = KeyValueConfig::load(config_path);
    Experiment exp = Experiment::from_config(cfg);
    CHECK(exp.attack_cfg.N == 8);
    CHECK(exp.prompts == std::vector<std::string>{"make it in snow"});
    CHECK(exp.dataset.items.size() == 4);
    CHECK(exp.workers == 2);
    RunOutput out = evaluate_whitebox(exp);
    CHECK(out.records.size() == 4);
    CHECK(!out.any_errors);

    // Unknown adapters fail loudly.
    cfg.set("backend", "instructpix2pix");
    CHECK_THROWS_AS(Experiment::from_config(cfg), ConfigError);
}

TEST_CASE("dataset validation rejects duplicates and bad labels") {
    Dataset ds;
    ds.label_names = {"a", "b"};
    ds.items.push_back({"x", "x.png", 0, std::nullopt, std::nullopt});
    ds.items.push_back({"x", "y.png", 1, std::nullopt, std::nullopt});
    CHECK_THROWS_AS(ds.validate(), InputError);
    ds.items[1].image_id = "y";
    ds.items[1].label = 5;
    CHECK_THROWS_AS(ds.validate(), InputError);
    ds.items[1].label = 1;
    CHECK_NOTHROW(ds.validate());
}

TEST_CASE("csv output carries the expected header and row count") {
    fs::path dir = fresh_dir("i2a_csv");
    Experiment exp = efficacy_experiment(dir, 3, "none");
    exp.prompts = {"make it in snow", "make it at night"};
    RunOutput out = evaluate_whitebox(exp);
    std::string csv = out.report.to_csv();
    CHECK(csv.rfind("group,prompt,source_model,target_model,count,accuracy_pct,failure_pct,"
                    "mean_lpips\n", 0) == 0);
    int lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 1 + 3);  // header + 2 prompt rows + (all) row
}

TEST_CASE("defense-wrapped evaluation runs the adaptive protocol deterministically") {
    fs::path dir = fresh_dir("i2a_defended");
    Experiment exp = efficacy_experiment(dir, 4, "pgd");
    exp.defense_spec = "gaussian:0.03";
    exp.eot_samples = 4;
    exp.adaptive_max_iters = 50;
    exp.noise_cfg.steps = 100;  // capped to 50 by the adaptive wrapper
    RunOutput a = evaluate_whitebox(exp);
    RunOutput b = evaluate_whitebox(exp);
    CHECK(!a.any_errors);
    REQUIRE(a.records.size() == 4);
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].iterations == 50);
        CHECK(a.records[i].predicted == b.records[i].predicted);
        CHECK(a.records[i].lpips == b.records[i].lpips);
    }
}

TEST_CASE("the generated prompt label resolves per-image instructions from the cache") {
    fs::path dir = fresh_dir("i2a_generated_prompts");
    Experiment exp = efficacy_experiment(dir, 4, "i2a");
    exp.prompts = {"make it in snow", "generated"};
    exp.instructions_cache_path = (dir / "cache.json").string();
    {
        instructions::InstructionCache cache;
        cache.put("img0", {"cap", "add heavy fog"});
        cache.put("img1", {"cap", "make it dusk"});
        cache.put("img2", {"cap", "add rain"});
        // img3 intentionally missing: that item errors, the run continues.
        cache.save(exp.instructions_cache_path);
    }
    RunOutput out = evaluate_whitebox(exp);
    REQUIRE(out.records.size() == 8);
    int generated_ok = 0, generated_err = 0;
    for (const RunRecord& r : out.records) {
        if (r.prompt != "generated") continue;
        if (r.error.empty())
            ++generated_ok;
        else
            ++generated_err;
    }
    CHECK(generated_ok == 3);
    CHECK(generated_err == 1);
    CHECK(out.any_errors);

    // The resolved instruction feeds the attack: a different cached edit
    // changes the conditioning, so results differ from the manual prompt.
    const RunRecord* manual = nullptr;
    const RunRecord* generated = nullptr;
    for (const RunRecord& r : out.records) {
        if (r.image_id != "img0") continue;
        if (r.prompt == "make it in snow") manual = &r;
        if (r.prompt == "generated") generated = &r;
    }
    REQUIRE(manual != nullptr);
    REQUIRE(generated != nullptr);
    CHECK(manual->lpips != generated->lpips);
}
