#include "mcmil/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mcmil/margins.hpp"
#include "mcmil/stats.hpp"

namespace mcmil {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- JSON helpers --------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    require(obj.is_object(), ErrorCode::config, "config: '" + where + "' must be an object");
    for (const auto& item : obj.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return item.key() == k; });
        require(known, ErrorCode::config, "config: unknown key '" + where + "." + item.key() + "'");
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorCode::config, "config: '" + where + "." + key + "' has the wrong type");
    }
}

json norm_to_json(double p) {
    if (std::isinf(p)) return "inf";
    return p;
}

double norm_from_json(const json& v) {
    if (v.is_string()) {
        const std::string s = v.get<std::string>();
        require(s == "inf" || s == "infinity", ErrorCode::config, "config: p_norm must be a number or \"inf\"");
        return std::numeric_limits<double>::infinity();
    }
    require(v.is_number(), ErrorCode::config, "config: p_norm must be a number or \"inf\"");
    return v.get<double>();
}

json opt_json(const std::optional<double>& v) {
    if (v && std::isfinite(*v)) return *v;
    return nullptr;
}

json finite_or_null(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

// Shortest round-trip decimal form.
std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// ---- file helpers --------------------------------------------------------

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec && fs::is_directory(dir), ErrorCode::io, "cannot create output directory '" + dir + "'");
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io, "cannot write '" + path.string() + "'");
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
    require(out.good(), ErrorCode::io, "write failed for '" + path.string() + "'");
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io, "cannot read '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

json seeds_json(const ExperimentConfig& c) {
    json s = json::array();
    for (auto v : c.seeds) s.push_back(v);
    return s;
}

void write_manifest(const std::string& out_dir, const char* subcommand, const ExperimentConfig& config,
                    const json& inputs = json::object()) {
    json m;
    m["artifact"] = "mcmil";
    m["version"] = kArtifactVersion;
    m["subcommand"] = subcommand;
    m["seeds"] = seeds_json(config);
    m["config"] = json::parse(config_to_json_text(config));
    m["inputs"] = inputs;
    write_text(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
}

// ---- config <-> JSON -----------------------------------------------------

json bagspec_to_json(const BagSpec& s) {
    json j;
    j["n_classes"] = s.n_classes;
    j["n_bags"] = s.n_bags;
    j["patches_per_bag"] = s.patches_per_bag;
    j["feature_dim"] = s.feature_dim;
    j["class_separation"] = s.class_separation;
    j["pattern_mix_rate"] = s.pattern_mix_rate;
    j["noise_tile_rate"] = s.noise_tile_rate;
    j["label_noise_rate"] = s.label_noise_rate;
    if (s.domain_shift) {
        json a = json::array();
        for (Eigen::Index r = 0; r < s.domain_shift->a.rows(); ++r) {
            json row = json::array();
            for (Eigen::Index c = 0; c < s.domain_shift->a.cols(); ++c) row.push_back(s.domain_shift->a(r, c));
            a.push_back(row);
        }
        json t = json::array();
        for (Eigen::Index i = 0; i < s.domain_shift->t.size(); ++i) t.push_back(s.domain_shift->t[i]);
        j["domain_shift"] = {{"a", a}, {"t", t}};
    }
    return j;
}

BagSpec bagspec_from_json(const json& j) {
    check_keys(j, {"n_classes", "n_bags", "patches_per_bag", "feature_dim", "class_separation", "pattern_mix_rate",
                   "noise_tile_rate", "label_noise_rate", "domain_shift", "seed"},
               "dataset");
    BagSpec s;
    read_field(j, "n_classes", s.n_classes, "dataset");
    read_field(j, "n_bags", s.n_bags, "dataset");
    read_field(j, "patches_per_bag", s.patches_per_bag, "dataset");
    read_field(j, "feature_dim", s.feature_dim, "dataset");
    read_field(j, "class_separation", s.class_separation, "dataset");
    read_field(j, "pattern_mix_rate", s.pattern_mix_rate, "dataset");
    read_field(j, "noise_tile_rate", s.noise_tile_rate, "dataset");
    read_field(j, "label_noise_rate", s.label_noise_rate, "dataset");
    read_field(j, "seed", s.seed, "dataset");
    if (j.contains("domain_shift") && !j.at("domain_shift").is_null()) {
        const json& d = j.at("domain_shift");
        check_keys(d, {"a", "t"}, "dataset.domain_shift");
        try {
            const auto rows = d.at("a").get<std::vector<std::vector<double>>>();
            const auto t = d.at("t").get<std::vector<double>>();
            DomainShift shift;
            shift.a.resize(static_cast<Eigen::Index>(rows.size()),
                           rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                require(rows[r].size() == rows[0].size(), ErrorCode::config,
                        "config: dataset.domain_shift.a is ragged");
                for (std::size_t c = 0; c < rows[r].size(); ++c) {
                    shift.a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
                }
            }
            shift.t = Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(t.size()));
            s.domain_shift = std::move(shift);
        } catch (const json::exception&) {
            fail(ErrorCode::config, "config: dataset.domain_shift needs numeric 'a' (matrix) and 't' (vector)");
        }
    }
    return s;
}

json weights_to_json(const LossWeights& w) {
    return {{"lambda_ce", w.lambda_ce},   {"lambda_con", w.lambda_con}, {"lambda_pf", w.lambda_pf},
            {"tau_con", w.tau_con},       {"alpha", w.alpha},           {"beta", w.beta},
            {"supcon_exclude_self", w.supcon_exclude_self}};
}

LossWeights weights_from_json(const json& j) {
    check_keys(j, {"lambda_ce", "lambda_con", "lambda_pf", "tau_con", "alpha", "beta", "supcon_exclude_self"},
               "train.loss_weights");
    LossWeights w;
    const std::string at = "train.loss_weights";
    read_field(j, "lambda_ce", w.lambda_ce, at);
    read_field(j, "lambda_con", w.lambda_con, at);
    read_field(j, "lambda_pf", w.lambda_pf, at);
    read_field(j, "tau_con", w.tau_con, at);
    read_field(j, "alpha", w.alpha, at);
    read_field(j, "beta", w.beta, at);
    read_field(j, "supcon_exclude_self", w.supcon_exclude_self, at);
    return w;
}

LossMode mode_from_json(const json& v, const std::string& where) {
    require(v.is_string(), ErrorCode::config, "config: '" + where + "' must be a loss-mode string");
    try {
        return loss_mode_from_string(v.get<std::string>());
    } catch (const Error& e) {
        fail(ErrorCode::config, "config: " + where + ": " + e.what());
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    try {
        require(!seeds.empty(), ErrorCode::config, "config: seeds must be nonempty");
        require(n_val >= 1, ErrorCode::config, "config: n_val must be >= 1");
        require(!loss_modes.empty(), ErrorCode::config, "config: loss_modes must be nonempty");
        if (!dataset_path) {
            dataset.validate();
            require(dataset.n_bags > n_val + 1, ErrorCode::config,
                    "config: dataset.n_bags must exceed n_val + 1");
            require(dataset.feature_dim == model.in_dim, ErrorCode::config,
                    "config: model.in_dim must equal dataset.feature_dim");
            require(dataset.n_classes == model.n_classes, ErrorCode::config,
                    "config: model.n_classes must equal dataset.n_classes");
        }
        model.validate();
        train.validate();
        require(tune.n_init >= 1 && tune.n_iter >= 0, ErrorCode::config,
                "config: tune.n_init >= 1 and tune.n_iter >= 0 required");
        require(margins.p_norm >= 1.0, ErrorCode::config, "config: margins.p_norm must be >= 1");
        require(margins.direction_budget >= 0 && margins.tol > 0.0, ErrorCode::config,
                "config: margins.direction_budget >= 0 and margins.tol > 0 required");
        require(stats.n_boot >= 1 && stats.level > 0.0 && stats.level < 1.0, ErrorCode::config,
                "config: stats.n_boot >= 1 and stats.level in (0, 1) required");
    } catch (const Error& e) {
        if (e.code() == ErrorCode::config) throw;
        fail(ErrorCode::config, std::string("config: ") + e.what());
    }
}

std::string config_to_json_text(const ExperimentConfig& c) {
    json j;
    if (c.dataset_path) {
        j["dataset_path"] = *c.dataset_path;
    } else {
        j["dataset"] = bagspec_to_json(c.dataset);
    }
    j["n_val"] = c.n_val;
    j["model"] = {{"in_dim", c.model.in_dim},           {"hidden", c.model.hidden},
                  {"latent", c.model.latent},           {"attn_hidden", c.model.attn_hidden},
                  {"n_classes", c.model.n_classes},     {"pooling", to_string(c.model.pooling)}};
    j["train"] = {{"learning_rate", c.train.learning_rate},
                  {"adam_beta1", c.train.adam_beta1},
                  {"adam_beta2", c.train.adam_beta2},
                  {"adam_epsilon", c.train.adam_epsilon},
                  {"patience", c.train.patience},
                  {"max_epochs", c.train.max_epochs},
                  {"batch_size", c.train.batch_size},
                  {"loss_mode", to_string(c.train.loss_mode)},
                  {"loss_weights", weights_to_json(c.train.loss_weights)},
                  {"margin",
                   {{"gamma", c.train.margin.gamma}, {"tau_m", c.train.margin.tau_m}, {"kappa", c.train.margin.kappa}}}};
    json modes = json::array();
    for (auto m : c.loss_modes) modes.push_back(to_string(m));
    j["loss_modes"] = modes;
    j["seeds"] = seeds_json(c);
    j["tune"] = {{"n_init", c.tune.n_init}, {"n_iter", c.tune.n_iter}, {"tune_tau_con", c.tune.tune_tau_con}};
    j["margins"] = {{"p_norm", norm_to_json(c.margins.p_norm)},
                    {"direction_budget", c.margins.direction_budget},
                    {"tol", c.margins.tol},
                    {"estimate_input", c.margins.estimate_input}};
    j["stats"] = {{"n_boot", c.stats.n_boot},
                  {"level", c.stats.level},
                  {"mcnemar_continuity", c.stats.mcnemar_continuity}};
    return j.dump(2);
}

ExperimentConfig config_from_json_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::config, std::string("config: invalid JSON: ") + e.what());
    }
    if (doc.is_object() && doc.contains("config") && doc.contains("artifact")) {
        doc = doc.at("config");
    }
    check_keys(doc, {"dataset", "dataset_path", "n_val", "model", "train", "loss_modes", "seeds", "tune", "margins",
                     "stats"},
               "config");
    ExperimentConfig c;
    require(!(doc.contains("dataset") && doc.contains("dataset_path")), ErrorCode::config,
            "config: give either 'dataset' or 'dataset_path', not both");
    if (doc.contains("dataset")) c.dataset = bagspec_from_json(doc.at("dataset"));
    if (doc.contains("dataset_path")) {
        std::string path;
        read_field(doc, "dataset_path", path, "config");
        c.dataset_path = path;
    }
    read_field(doc, "n_val", c.n_val, "config");
    if (doc.contains("model")) {
        const json& m = doc.at("model");
        check_keys(m, {"in_dim", "hidden", "latent", "attn_hidden", "n_classes", "pooling"}, "model");
        read_field(m, "in_dim", c.model.in_dim, "model");
        read_field(m, "hidden", c.model.hidden, "model");
        read_field(m, "latent", c.model.latent, "model");
        read_field(m, "attn_hidden", c.model.attn_hidden, "model");
        read_field(m, "n_classes", c.model.n_classes, "model");
        if (m.contains("pooling")) {
            std::string name;
            read_field(m, "pooling", name, "model");
            try {
                c.model.pooling = pooling_from_string(name);
            } catch (const Error& e) {
                fail(ErrorCode::config, std::string("config: model.pooling: ") + e.what());
            }
        }
    }
    if (doc.contains("train")) {
        const json& t = doc.at("train");
        check_keys(t, {"learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon", "patience", "max_epochs",
                       "batch_size", "loss_mode", "loss_weights", "margin"},
                   "train");
        read_field(t, "learning_rate", c.train.learning_rate, "train");
        read_field(t, "adam_beta1", c.train.adam_beta1, "train");
        read_field(t, "adam_beta2", c.train.adam_beta2, "train");
        read_field(t, "adam_epsilon", c.train.adam_epsilon, "train");
        read_field(t, "patience", c.train.patience, "train");
        read_field(t, "max_epochs", c.train.max_epochs, "train");
        read_field(t, "batch_size", c.train.batch_size, "train");
        if (t.contains("loss_mode")) c.train.loss_mode = mode_from_json(t.at("loss_mode"), "train.loss_mode");
        if (t.contains("loss_weights")) c.train.loss_weights = weights_from_json(t.at("loss_weights"));
        if (t.contains("margin")) {
            const json& mg = t.at("margin");
            check_keys(mg, {"gamma", "tau_m", "kappa"}, "train.margin");
            read_field(mg, "gamma", c.train.margin.gamma, "train.margin");
            read_field(mg, "tau_m", c.train.margin.tau_m, "train.margin");
            read_field(mg, "kappa", c.train.margin.kappa, "train.margin");
        }
    }
    if (doc.contains("loss_modes")) {
        const json& lm = doc.at("loss_modes");
        require(lm.is_array(), ErrorCode::config, "config: loss_modes must be an array");
        c.loss_modes.clear();
        for (const auto& v : lm) c.loss_modes.push_back(mode_from_json(v, "loss_modes"));
    }
    if (doc.contains("seeds")) {
        const json& s = doc.at("seeds");
        require(s.is_array(), ErrorCode::config, "config: seeds must be an array");
        c.seeds.clear();
        for (const auto& v : s) {
            require(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0), ErrorCode::config,
                    "config: seeds must be nonnegative integers");
            c.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    if (doc.contains("tune")) {
        const json& t = doc.at("tune");
        check_keys(t, {"n_init", "n_iter", "tune_tau_con"}, "tune");
        read_field(t, "n_init", c.tune.n_init, "tune");
        read_field(t, "n_iter", c.tune.n_iter, "tune");
        read_field(t, "tune_tau_con", c.tune.tune_tau_con, "tune");
    }
    if (doc.contains("margins")) {
        const json& m = doc.at("margins");
        check_keys(m, {"p_norm", "direction_budget", "tol", "estimate_input"}, "margins");
        if (m.contains("p_norm")) c.margins.p_norm = norm_from_json(m.at("p_norm"));
        read_field(m, "direction_budget", c.margins.direction_budget, "margins");
        read_field(m, "tol", c.margins.tol, "margins");
        read_field(m, "estimate_input", c.margins.estimate_input, "margins");
    }
    if (doc.contains("stats")) {
        const json& s = doc.at("stats");
        check_keys(s, {"n_boot", "level", "mcnemar_continuity"}, "stats");
        read_field(s, "n_boot", c.stats.n_boot, "stats");
        read_field(s, "level", c.stats.level, "stats");
        read_field(s, "mcnemar_continuity", c.stats.mcnemar_continuity, "stats");
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = read_text(path);
    } catch (const Error& e) {
        fail(ErrorCode::config, e.what());
    }
    return config_from_json_text(text);
}

void apply_overrides(ExperimentConfig& config, const Overrides& overrides) {
    if (overrides.seed) config.seeds = {*overrides.seed};
    if (overrides.loss_mode) config.train.loss_mode = *overrides.loss_mode;
    config.validate();
}

DataSplit load_split(const ExperimentConfig& config, std::uint64_t seed, int threads) {
    std::vector<PatchBag> bags;
    if (config.dataset_path) {
        bags = read_bags_ndjson(*config.dataset_path);
    } else {
        BagSpec spec = config.dataset;
        spec.seed = seed;
        bags = generate_bags(spec, threads);
    }
    const auto n_val = static_cast<std::size_t>(config.n_val);
    require(bags.size() > n_val + 1, ErrorCode::config, "dataset has too few bags for n_val");
    DataSplit split;
    split.train.assign(bags.begin(), bags.end() - static_cast<std::ptrdiff_t>(n_val));
    split.val.assign(bags.end() - static_cast<std::ptrdiff_t>(n_val), bags.end());
    return split;
}

void save_checkpoint(const ModelParams& p, const MarginNormalizer& normalizer, const std::string& path) {
    json doc = json::parse(model_to_json(p));
    doc["margin_normalizer"] = {{"lo", normalizer.lo}, {"hi", normalizer.hi}};
    write_text(path, doc.dump(1) + "\n");
}

std::pair<ModelParams, MarginNormalizer> load_checkpoint(const std::string& path) {
    const std::string text = read_text(path);
    ModelParams p = model_from_json(text);
    MarginNormalizer norm;
    const json doc = json::parse(text);
    if (doc.contains("margin_normalizer")) {
        try {
            norm.lo = doc.at("margin_normalizer").at("lo").get<double>();
            norm.hi = doc.at("margin_normalizer").at("hi").get<double>();
        } catch (const json::exception&) {
            fail(ErrorCode::io, "checkpoint: malformed margin_normalizer in '" + path + "'");
        }
    }
    return {std::move(p), norm};
}

std::vector<std::string> run_log_records(const RunHistory& history) {
    std::vector<std::string> lines;
    std::size_t s = 0;
    for (const auto& e : history.epochs) {
        for (; s < history.steps.size() && history.steps[s].epoch <= e.epoch; ++s) {
            const StepRecord& st = history.steps[s];
            json r;
            r["type"] = "step";
            r["step"] = st.step;
            r["epoch"] = st.epoch;
            r["L_CE"] = st.loss.ce;
            r["L_CON"] = st.loss.con;
            r["L_PF"] = st.loss.pf;
            r["L_T"] = st.loss.total;
            r["mean_omega"] = st.loss.mean_omega;
            lines.push_back(r.dump());
        }
        json r;
        r["type"] = "epoch";
        r["epoch"] = e.epoch;
        r["L_CE"] = e.train.ce;
        r["L_CON"] = e.train.con;
        r["L_PF"] = e.train.pf;
        r["L_T"] = e.train.total;
        r["mean_omega"] = e.train.mean_omega;
        r["train_accuracy"] = e.train_accuracy;
        r["val_accuracy"] = e.val_accuracy;
        r["mean_d_out"] = e.mean_d_out;
        r["kendall_feat_out"] = opt_json(e.kendall_feat_out);
        r["neural_collapse"] = opt_json(e.neural_collapse);
        r["omega_misclassified"] = opt_json(e.omega_misclassified);
        r["omega_correct"] = opt_json(e.omega_correct);
        lines.push_back(r.dump());
    }
    // Steps of a diverged partial epoch.
    for (; s < history.steps.size(); ++s) {
        const StepRecord& st = history.steps[s];
        json r = {{"type", "step"},     {"step", st.step},      {"epoch", st.epoch},
                  {"L_CE", st.loss.ce}, {"L_CON", st.loss.con}, {"L_PF", st.loss.pf},
                  {"L_T", finite_or_null(st.loss.total)},       {"mean_omega", st.loss.mean_omega}};
        lines.push_back(r.dump());
    }
    json summary;
    summary["type"] = "summary";
    summary["stopping_epoch"] = history.stopping_epoch;
    summary["best_epoch"] = history.best_epoch;
    summary["best_val_accuracy"] = history.best_val_accuracy;
    summary["last10_val_accuracy_mean"] = history.last10_mean;
    summary["last10_val_accuracy_std"] = history.last10_std;
    lines.push_back(summary.dump());
    return lines;
}

namespace {

void write_run_log(const fs::path& path, const RunHistory& history, std::uint64_t seed, LossMode mode) {
    auto out = open_out(path);
    json header = {{"type", "header"},
                   {"timestamp", utc_timestamp()},
                   {"version", kArtifactVersion},
                   {"seed", seed},
                   {"loss_mode", to_string(mode)}};
    out << header.dump() << '\n';
    for (const auto& line : run_log_records(history)) out << line << '\n';
    require(out.good(), ErrorCode::io, "write failed for '" + path.string() + "'");
}

struct RunOutcome {
    TrainResult result;
    EvalReport val;
};

RunOutcome train_one(const ExperimentConfig& config, std::uint64_t seed, LossMode mode, const DataSplit& split,
                     const fs::path& dir, int threads) {
    TrainConfig tc = config.train;
    tc.seed = seed;
    tc.loss_mode = mode;
    tc.threads = threads;
    try {
        TrainResult r = train(config.model, tc, split.train, split.val);
        write_run_log(dir / "run_log.ndjson", r.history, seed, mode);
        save_checkpoint(r.model, r.normalizer, (dir / "model.json").string());
        EvalReport val = evaluate(r.model, split.val, threads);
        return {std::move(r), std::move(val)};
    } catch (const DivergedError& e) {
        write_run_log(dir / "run_log.ndjson", e.history(), seed, mode);
        save_checkpoint(e.last_finite(), MarginNormalizer{}, (dir / "model.diverged.json").string());
        throw;
    }
}

}  // namespace

void run_generate(const ExperimentConfig& config, const std::string& out_dir, int threads) {
    require(!config.dataset_path, ErrorCode::config, "generate: needs a 'dataset' spec, not 'dataset_path'");
    ensure_dir(out_dir);
    BagSpec spec = config.dataset;
    spec.seed = config.seeds.front();
    const auto bags = generate_bags(spec, threads);
    write_bags_ndjson(bags, (fs::path(out_dir) / "bags.ndjson").string());
    json sidecar = bagspec_to_json(spec);
    sidecar["seed"] = spec.seed;
    write_text(fs::path(out_dir) / "bagspec.json", sidecar.dump(2) + "\n");
    write_manifest(out_dir, "generate", config);
}

void run_train(const ExperimentConfig& config, const std::string& out_dir, int threads) {
    config.validate();
    ensure_dir(out_dir);
    write_manifest(out_dir, "train", config);
    const std::uint64_t seed = config.seeds.front();
    const DataSplit split = load_split(config, seed, threads);
    const RunOutcome r = train_one(config, seed, config.train.loss_mode, split, out_dir, threads);
    json summary = {{"seed", seed},
                    {"loss_mode", to_string(config.train.loss_mode)},
                    {"best_epoch", r.result.history.best_epoch},
                    {"stopping_epoch", r.result.history.stopping_epoch},
                    {"best_val_accuracy", r.result.history.best_val_accuracy},
                    {"last10_val_accuracy_mean", r.result.history.last10_mean},
                    {"last10_val_accuracy_std", r.result.history.last10_std},
                    {"val_accuracy", r.val.accuracy}};
    write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
}

void run_tune(const ExperimentConfig& config, const std::string& out_dir, int threads) {
    config.validate();
    ensure_dir(out_dir);
    write_manifest(out_dir, "tune", config);
    const std::uint64_t seed = config.seeds.front();
    const DataSplit split = load_split(config, seed, threads);
    const SearchSpace space = SearchSpace::margin_defaults(config.tune.tune_tau_con);

    std::vector<double> raw;
    std::vector<Vector> points;
    const Objective objective = [&](const Vector& x) {
        TrainConfig tc = config.train;
        tc.seed = seed;
        tc.threads = threads;
        tc.margin.gamma = x[0];
        tc.margin.tau_m = x[1];
        tc.margin.kappa = x[2];
        tc.loss_weights.alpha = x[3];
        tc.loss_weights.beta = x[4];
        if (config.tune.tune_tau_con) tc.loss_weights.tau_con = x[5];
        double value = std::numeric_limits<double>::quiet_NaN();
        try {
            value = -train(config.model, tc, split.train, split.val).history.best_val_accuracy;
        } catch (const DivergedError&) {
        }
        raw.push_back(value);
        points.push_back(x);
        return value;
    };
    BoOptions opts;
    opts.n_init = config.tune.n_init;
    opts.n_iter = config.tune.n_iter;
    Rng rng(seed, 7);
    const BOState state = bo_optimize(objective, space, opts, rng);

    auto out = open_out(fs::path(out_dir) / "tune.csv");
    out << "iteration";
    for (const auto& d : space.dims) out << ',' << d.name;
    out << ",objective,incumbent,best_ei\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
        out << i;
        for (Eigen::Index d = 0; d < points[i].size(); ++d) out << ',' << fmt(points[i][d]);
        out << ',' << fmt(raw[i]) << ',' << fmt(state.incumbent_trace[i]) << ',';
        const auto n_init = static_cast<std::size_t>(opts.n_init);
        if (i >= n_init) out << fmt(state.ei_trace[i - n_init]);
        out << '\n';
    }
    require(out.good(), ErrorCode::io, "write failed for tune.csv");

    json best;
    const Vector bx = space.from_unit(state.best().x);
    for (std::size_t d = 0; d < space.size(); ++d) best[space.dims[d].name] = bx[static_cast<Eigen::Index>(d)];
    json report = {{"seed", seed}, {"best", best}, {"objective", state.best().value},
                   {"evaluations", points.size()}};
    write_text(fs::path(out_dir) / "tune_best.json", report.dump(2) + "\n");
}

void run_margins(const ExperimentConfig& config, const std::string& model_path, const std::string& out_dir,
                 int threads) {
    config.validate();
    ensure_dir(out_dir);
    write_manifest(out_dir, "margins", config, {{"model", model_path}});
    const auto [model, normalizer] = load_checkpoint(model_path);
    const std::uint64_t seed = config.seeds.front();
    const DataSplit split = load_split(config, seed, threads);

    MarginOptions opts;
    opts.p_norm = config.margins.p_norm;
    opts.estimate_input = config.margins.estimate_input;
    opts.input.direction_budget = config.margins.direction_budget;
    opts.input.tol = config.margins.tol;
    opts.seed = seed;
    const auto reports = margin_reports(model, split.val, normalizer, config.train.margin, opts, threads);

    auto out = open_out(fs::path(out_dir) / "margins.csv");
    out << "bag_id,predicted,label,d_out,d_feat,d_in_estimate,omega\n";
    std::vector<double> d_out, d_feat, d_in;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const MarginReport& r = reports[i];
        out << split.train.size() + i << ',' << r.predicted << ',' << r.label << ',' << fmt(r.d_out) << ','
            << fmt(r.d_feat) << ',' << (r.d_in_estimate ? fmt(*r.d_in_estimate) : std::string()) << ','
            << fmt(r.omega) << '\n';
        d_out.push_back(r.d_out);
        d_feat.push_back(r.d_feat);
        if (r.d_in_estimate) d_in.push_back(*r.d_in_estimate);
    }
    require(out.good(), ErrorCode::io, "write failed for margins.csv");

    json summary;
    summary["n_bags"] = reports.size();
    auto try_tau = [](std::span<const double> a, std::span<const double> b) -> json {
        try {
            return kendall_tau(a, b);
        } catch (const Error&) {
            return nullptr;
        }
    };
    summary["kendall_feat_out"] = reports.size() >= 2 ? try_tau(d_feat, d_out) : json(nullptr);
    if (d_in.size() == reports.size() && reports.size() >= 2) {
        summary["kendall_in_out"] = try_tau(d_in, d_out);
        std::vector<double> sorted = d_in;
        std::sort(sorted.begin(), sorted.end());
        const double median = quantile_sorted(sorted, 0.5);
        std::vector<bool> robust;
        for (double v : d_in) robust.push_back(!(v < median));
        try {
            summary["margin_separation_auroc"] = margin_separation_auroc(d_out, robust);
        } catch (const Error&) {
            summary["margin_separation_auroc"] = nullptr;
        }
        summary["d_in_median"] = finite_or_null(median);
    }
    write_text(fs::path(out_dir) / "margins_summary.json", summary.dump(2) + "\n");
}

void write_predictions_csv(const EvalReport& report, const std::string& path) {
    auto out = open_out(path);
    const Eigen::Index k = report.bags.empty() ? 0 : report.bags.front().probabilities.size();
    out << "bag_id,label,pred";
    for (Eigen::Index c = 0; c < k; ++c) out << ",score_" << c;
    out << '\n';
    for (std::size_t i = 0; i < report.bags.size(); ++i) {
        const BagScore& b = report.bags[i];
        out << i << ',' << b.label << ',' << b.predicted;
        for (Eigen::Index c = 0; c < k; ++c) out << ',' << fmt(b.probabilities[c]);
        out << '\n';
    }
    require(out.good(), ErrorCode::io, "write failed for '" + path + "'");
}

PredictionTable read_predictions_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::io, "cannot read '" + path + "'");
    auto split_line = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::io, "'" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_line(line);
    require(header.size() >= 5 && header[0] == "bag_id" && header[1] == "label" && header[2] == "pred",
            ErrorCode::io, "'" + path + "': expected header bag_id,label,pred,score_0,...");
    const std::size_t k = header.size() - 3;
    for (std::size_t c = 0; c < k; ++c) {
        require(header[3 + c] == "score_" + std::to_string(c), ErrorCode::io,
                "'" + path + "': score columns must be score_0..score_{K-1}");
    }
    PredictionTable t;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_line(line);
        const std::string where = path + ":" + std::to_string(line_no);
        require(cells.size() == header.size(), ErrorCode::io, where + ": wrong number of columns");
        try {
            t.bag_id.push_back(std::stoi(cells[0]));
            const int label = std::stoi(cells[1]);
            const int pred = std::stoi(cells[2]);
            require(label >= 0 && label < static_cast<int>(k) && pred >= 0 && pred < static_cast<int>(k),
                    ErrorCode::io, where + ": label/pred outside [0, K)");
            t.label.push_back(label);
            t.pred.push_back(pred);
            Vector s(static_cast<Eigen::Index>(k));
            for (std::size_t c = 0; c < k; ++c) s[static_cast<Eigen::Index>(c)] = std::stod(cells[3 + c]);
            t.scores.push_back(std::move(s));
        } catch (const std::logic_error&) {
            fail(ErrorCode::io, where + ": malformed number");
        }
    }
    require(!t.label.empty(), ErrorCode::io, "'" + path + "' has no rows");
    return t;
}

namespace {

json metrics_json(const ClassMetrics& m) {
    return {{"sensitivity", opt_json(m.sensitivity)},
            {"specificity", opt_json(m.specificity)},
            {"ppv", opt_json(m.ppv)},
            {"npv", opt_json(m.npv)}};
}

json single_report(const PredictionTable& t, const StatsSettings& settings, Rng& rng, int threads) {
    const int k = static_cast<int>(t.scores.front().size());
    const std::size_t n = t.label.size();
    std::vector<double> correct(n);
    for (std::size_t i = 0; i < n; ++i) correct[i] = t.label[i] == t.pred[i] ? 1.0 : 0.0;
    json r;
    r["n"] = n;
    r["accuracy"] = mean(correct);
    const Interval ci = bootstrap_ci(correct, settings.n_boot, settings.level, rng, threads);
    r["accuracy_ci"] = {{"level", settings.level}, {"lo", ci.lo}, {"hi", ci.hi}, {"n_boot", settings.n_boot}};
    const Confusion conf = confusion_matrix(t.label, t.pred, k);
    r["confusion"] = conf;
    const auto metrics = per_class_metrics(conf);
    json classes = json::array();
    std::vector<double> sensitivities;
    for (int c = 0; c < k; ++c) {
        json cj = metrics_json(metrics[static_cast<std::size_t>(c)]);
        cj["class"] = c;
        std::vector<double> scores(n);
        std::vector<int> is_c(n);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = t.scores[i][c];
            is_c[i] = t.label[i] == c ? 1 : 0;
        }
        try {
            cj["roc_auc"] = roc_auc(scores, is_c);
            cj["cap_accuracy_ratio"] = cap_curve(scores, is_c).accuracy_ratio;
        } catch (const Error&) {
            cj["roc_auc"] = nullptr;
            cj["cap_accuracy_ratio"] = nullptr;
        }
        if (metrics[static_cast<std::size_t>(c)].sensitivity) {
            sensitivities.push_back(*metrics[static_cast<std::size_t>(c)].sensitivity);
        }
        classes.push_back(cj);
    }
    r["per_class"] = classes;
    try {
        r["sensitivity_cv_percent"] = sensitivities.size() >= 2 ? json(coefficient_of_variation(sensitivities))
                                                                 : json(nullptr);
    } catch (const Error&) {
        r["sensitivity_cv_percent"] = nullptr;
    }
    return r;
}

}  // namespace

std::string stats_report(const PredictionTable& a, const PredictionTable* b, const StatsSettings& settings,
                         std::uint64_t seed, int threads) {
    require(!a.label.empty(), ErrorCode::empty_input, "stats: empty prediction table");
    Rng rng(seed, 11);
    json report;
    report["a"] = single_report(a, settings, rng, threads);
    if (b != nullptr) {
        require(b->label.size() == a.label.size() && b->scores.front().size() == a.scores.front().size(),
                ErrorCode::dimension, "stats: prediction files differ in size or class count");
        for (std::size_t i = 0; i < a.label.size(); ++i) {
            require(a.bag_id[i] == b->bag_id[i] && a.label[i] == b->label[i], ErrorCode::label,
                    "stats: prediction files are not paired (bag_id/label mismatch at row " + std::to_string(i) +
                        ")");
        }
        report["b"] = single_report(*b, settings, rng, threads);
        json paired;
        std::vector<PairedPrediction> pp;
        for (std::size_t i = 0; i < a.label.size(); ++i) pp.push_back({a.label[i], a.pred[i], b->pred[i]});
        try {
            const McNemarResult m = mcnemar(pp, settings.mcnemar_continuity);
            paired["mcnemar"] = {{"b", m.b}, {"c", m.c}, {"chi2", m.chi2}, {"p", m.p},
                                 {"continuity_correction", settings.mcnemar_continuity}};
        } catch (const Error& e) {
            paired["mcnemar"] = {{"error", e.what()}};
        }
        const int k = static_cast<int>(a.scores.front().size());
        json fisher = json::array();
        for (int c = 0; c < k; ++c) {
            Table2x2 t{};
            for (std::size_t i = 0; i < a.label.size(); ++i) {
                if (a.label[i] != c) continue;
                ++t[0][a.pred[i] == c ? 0 : 1];
                ++t[1][b->pred[i] == c ? 0 : 1];
            }
            json fj = {{"class", c}, {"table", t}};
            try {
                const double p = fisher_exact(t);
                fj["p"] = p;
                fj["p_bonferroni"] = std::min(1.0, p * k);
            } catch (const Error&) {
                fj["p"] = nullptr;
                fj["p_bonferroni"] = nullptr;
            }
            fisher.push_back(fj);
        }
        paired["fisher_per_class"] = fisher;
        paired["bonferroni_factor"] = k;
        std::vector<double> ta, tb;
        for (std::size_t i = 0; i < a.label.size(); ++i) {
            ta.push_back(a.scores[i][a.label[i]]);
            tb.push_back(b->scores[i][b->label[i]]);
        }
        try {
            paired["cohens_d_true_class_score"] = cohens_d(ta, tb);
        } catch (const Error&) {
            paired["cohens_d_true_class_score"] = nullptr;
        }
        try {
            const LeveneResult lv = levene({ta, tb});
            paired["levene_true_class_score"] = {{"w", finite_or_null(lv.w)}, {"p", lv.p}};
        } catch (const Error&) {
            paired["levene_true_class_score"] = nullptr;
        }
        report["paired"] = paired;
    }
    return report.dump(2);
}

void run_evaluate(const ExperimentConfig& config, const std::string& model_path, const std::string& out_dir,
                  int threads) {
    config.validate();
    ensure_dir(out_dir);
    write_manifest(out_dir, "evaluate", config, {{"model", model_path}});
    const auto [model, normalizer] = load_checkpoint(model_path);
    (void)normalizer;
    const DataSplit split = load_split(config, config.seeds.front(), threads);
    const EvalReport rep = evaluate(model, split.val, threads);
    write_predictions_csv(rep, (fs::path(out_dir) / "predictions.csv").string());
    json summary = {{"n", rep.bags.size()}, {"accuracy", rep.accuracy}, {"confusion", rep.confusion}};
    write_text(fs::path(out_dir) / "eval.json", summary.dump(2) + "\n");
}

void run_stats(const ExperimentConfig& config, const std::string& pred_a, const std::optional<std::string>& pred_b,
               const std::string& out_dir, int threads) {
    config.validate();
    ensure_dir(out_dir);
    json inputs = {{"pred", pred_a}};
    if (pred_b) inputs["pred_b"] = *pred_b;
    write_manifest(out_dir, "stats", config, inputs);
    const PredictionTable a = read_predictions_csv(pred_a);
    std::optional<PredictionTable> b;
    if (pred_b) b = read_predictions_csv(*pred_b);
    const std::string text = stats_report(a, b ? &*b : nullptr, config.stats, config.seeds.front(), threads);
    write_text(fs::path(out_dir) / "stats.json", text + "\n");
}

void run_ablate(const ExperimentConfig& config, const std::string& out_dir, int threads) {
    config.validate();
    ensure_dir(out_dir);
    write_manifest(out_dir, "ablate", config);

    std::vector<DataSplit> splits(config.seeds.size());
    for (std::size_t s = 0; s < config.seeds.size(); ++s) splits[s] = load_split(config, config.seeds[s], threads);

    struct Job {
        LossMode mode;
        std::size_t seed_index;
        fs::path dir;
    };
    std::vector<Job> jobs;
    for (LossMode mode : config.loss_modes) {
        for (std::size_t s = 0; s < config.seeds.size(); ++s) {
            const fs::path dir = fs::path(out_dir) / "runs" /
                                 (std::string(to_string(mode)) + "_seed" + std::to_string(config.seeds[s]));
            ensure_dir(dir.string());
            jobs.push_back({mode, s, dir});
        }
    }
    struct JobResult {
        double best_val_accuracy = 0.0;
        double last10_mean = 0.0;
        double mean_d_out = 0.0;
    };
    std::vector<JobResult> results(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t j) {
        const Job& job = jobs[j];
        const RunOutcome r =
            train_one(config, config.seeds[job.seed_index], job.mode, splits[job.seed_index], job.dir, 1);
        std::vector<double> d_out;
        for (const auto& b : r.val.bags) d_out.push_back(b.d_out);
        results[j] = {r.result.history.best_val_accuracy, r.result.history.last10_mean, mean(d_out)};
    });

    auto out = open_out(fs::path(out_dir) / "ablation.csv");
    out << "loss_mode,n_seeds,mean_accuracy,std_accuracy,mean_last10_accuracy,std_last10_accuracy,mean_d_out\n";
    json runs = json::array();
    std::size_t j = 0;
    for (LossMode mode : config.loss_modes) {
        std::vector<double> acc, last10, dout;
        for (std::size_t s = 0; s < config.seeds.size(); ++s, ++j) {
            acc.push_back(results[j].best_val_accuracy);
            last10.push_back(results[j].last10_mean);
            dout.push_back(results[j].mean_d_out);
            runs.push_back({{"loss_mode", to_string(mode)},
                            {"seed", config.seeds[s]},
                            {"best_val_accuracy", results[j].best_val_accuracy},
                            {"last10_val_accuracy_mean", results[j].last10_mean},
                            {"mean_d_out", results[j].mean_d_out}});
        }
        const double sd = acc.size() >= 2 ? sample_sd(acc) : 0.0;
        const double sd10 = last10.size() >= 2 ? sample_sd(last10) : 0.0;
        out << to_string(mode) << ',' << acc.size() << ',' << fmt(mean(acc)) << ',' << fmt(sd) << ','
            << fmt(mean(last10)) << ',' << fmt(sd10) << ',' << fmt(mean(dout)) << '\n';
    }
    require(out.good(), ErrorCode::io, "write failed for ablation.csv");
    write_text(fs::path(out_dir) / "ablation_runs.json", runs.dump(2) + "\n");
}

}  // namespace mcmil
