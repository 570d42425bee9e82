#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mcmil/experiment.hpp"

using namespace mcmil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
    const fs::path p = fs::temp_directory_path() / ("mcmil-test-" + name + "-" + std::to_string(tick));
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.dataset.n_bags = 20;
    c.dataset.patches_per_bag = 6;
    c.n_val = 6;
    c.train.learning_rate = 1e-2;
    c.train.max_epochs = 2;
    c.train.patience = 2;
    c.train.batch_size = 7;
    c.margins.direction_budget = 2;
    c.stats.n_boot = 100;
    return c;
}

}  // namespace

TEST_CASE("config JSON round trip") {
    ExperimentConfig c = tiny();
    c.model.pooling = Pooling::mean;
    c.seeds = {3, 9};
    c.loss_modes = {LossMode::ce};
    c.margins.p_norm = std::numeric_limits<double>::infinity();
    c.train.loss_weights.alpha = 0.25;
    const std::string text = config_to_json_text(c);
    const ExperimentConfig back = config_from_json_text(text);
    CHECK(config_to_json_text(back) == text);
    CHECK(back.model.pooling == Pooling::mean);
    CHECK(back.seeds == std::vector<std::uint64_t>{3, 9});
    CHECK(std::isinf(back.margins.p_norm));
    CHECK(back.train.loss_weights.alpha == 0.25);
}

TEST_CASE("missing keys keep defaults, unknown keys are rejected") {
    const ExperimentConfig c = config_from_json_text(R"({"train": {"max_epochs": 7}})");
    CHECK(c.train.max_epochs == 7);
    CHECK(c.train.learning_rate == TrainConfig{}.learning_rate);
    CHECK(c.dataset.n_bags == BagSpec{}.n_bags);
    auto code = [](const std::string& text) {
        try {
            config_from_json_text(text);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::io;
    };
    CHECK(code(R"({"trian": {}})") == ErrorCode::config);
    CHECK(code(R"({"train": {"lr": 1}})") == ErrorCode::config);
    CHECK(code(R"({"train": {"max_epochs": "ten"}})") == ErrorCode::config);
    CHECK(code(R"({"train": {"learning_rate": -1}})") == ErrorCode::config);
    CHECK(code("not json") == ErrorCode::config);
    CHECK(code(R"({"n_val": 400})") == ErrorCode::config);
}

TEST_CASE("overrides replace seeds and loss mode") {
    ExperimentConfig c = tiny();
    c.seeds = {1, 2, 3};
    apply_overrides(c, Overrides{std::uint64_t{42}, LossMode::ce_con});
    CHECK(c.seeds == std::vector<std::uint64_t>{42});
    CHECK(c.train.loss_mode == LossMode::ce_con);
}

TEST_CASE("validation split is the tail of the generated set") {
    const ExperimentConfig c = tiny();
    const DataSplit s = load_split(c, 5);
    CHECK(s.train.size() == 14u);
    CHECK(s.val.size() == 6u);
    BagSpec spec = c.dataset;
    spec.seed = 5;
    const auto all = generate_bags(spec);
    CHECK(s.val.back().patches == all.back().patches);
    CHECK(s.train.front().patches == all.front().patches);
}

TEST_CASE("checkpoint keeps the normaliser") {
    const fs::path dir = scratch("ckpt");
    Rng rng(1);
    const ModelParams p = ModelParams::initialize(ModelDims{}, rng);
    save_checkpoint(p, MarginNormalizer{0.125, 3.5}, (dir / "m.json").string());
    const auto [q, n] = load_checkpoint((dir / "m.json").string());
    CHECK(q.flatten() == p.flatten());
    CHECK(n.lo == 0.125);
    CHECK(n.hi == 3.5);
    fs::remove_all(dir);
}

TEST_CASE("train, evaluate and stats artifacts") {
    const fs::path dir = scratch("pipeline");
    ExperimentConfig c = tiny();
    run_train(c, (dir / "train").string(), 2);
    for (const char* f : {"manifest.json", "run_log.ndjson", "model.json", "summary.json"}) {
        CHECK(fs::exists(dir / "train" / f));
    }
    const auto manifest = nlohmann::json::parse(slurp(dir / "train" / "manifest.json"));
    CHECK(manifest.at("subcommand") == "train");
    CHECK(manifest.at("version") == kArtifactVersion);
    CHECK(config_to_json_text(config_from_json_text(manifest.dump())) == config_to_json_text(c));

    std::istringstream log(slurp(dir / "train" / "run_log.ndjson"));
    std::string line;
    std::getline(log, line);
    CHECK(nlohmann::json::parse(line).at("type") == "header");
    int epochs = 0;
    std::string last;
    while (std::getline(log, line)) {
        const auto rec = nlohmann::json::parse(line);
        epochs += rec.at("type") == "epoch";
        last = rec.at("type");
        if (rec.at("type") == "step") {
            for (const char* key : {"L_CE", "L_CON", "L_PF", "L_T", "mean_omega"}) CHECK(rec.contains(key));
        }
    }
    CHECK(epochs >= 1);
    CHECK(last == "summary");

    run_evaluate(c, (dir / "train" / "model.json").string(), (dir / "eval").string(), 1);
    const PredictionTable t = read_predictions_csv((dir / "eval" / "predictions.csv").string());
    CHECK(t.label.size() == 6u);
    CHECK(t.scores.front().size() == 5);
    CHECK(t.scores.front().sum() == doctest::Approx(1.0).epsilon(1e-9));

    const auto report = nlohmann::json::parse(stats_report(t, &t, c.stats, 1, 1));
    CHECK(report.at("a").contains("accuracy"));
    CHECK(report.at("b").contains("accuracy"));
    CHECK(report.contains("paired"));
    fs::remove_all(dir);
}

TEST_CASE("predictions CSV round trip") {
    const fs::path dir = scratch("csv");
    BagSpec spec;
    spec.n_bags = 9;
    spec.patches_per_bag = 4;
    Rng rng(2);
    const EvalReport r = evaluate(ModelParams::initialize(ModelDims{}, rng), generate_bags(spec));
    write_predictions_csv(r, (dir / "p.csv").string());
    const PredictionTable t = read_predictions_csv((dir / "p.csv").string());
    REQUIRE(t.pred.size() == 9u);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(t.bag_id[i] == static_cast<int>(i));
        CHECK(t.label[i] == r.bags[i].label);
        CHECK(t.pred[i] == r.bags[i].predicted);
        CHECK(t.scores[i] == r.bags[i].probabilities);
    }
    CHECK_THROWS_AS(read_predictions_csv((dir / "missing.csv").string()), Error);
    fs::remove_all(dir);
}
