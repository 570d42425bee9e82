#include "mcmil/c_api.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mcmil/experiment.hpp"
#include "mcmil/selftest.hpp"

struct mcmil_dataset {
    std::vector<mcmil::PatchBag> bags;
};

struct mcmil_model {
    mcmil::ModelParams params;
    mcmil::MarginNormalizer normalizer;
};

namespace {

using nlohmann::json;

thread_local std::string last_error;

mcmil_status status_for(mcmil::ErrorCode code) {
    using mcmil::ErrorCode;
    switch (code) {
        case ErrorCode::config:
        case ErrorCode::spec:
            return MCMIL_ERR_CONFIG;
        case ErrorCode::parameter:
        case ErrorCode::label:
            return MCMIL_ERR_INVALID_ARGUMENT;
        case ErrorCode::dimension:
            return MCMIL_ERR_DIMENSION;
        case ErrorCode::diverged:
            return MCMIL_ERR_DIVERGED;
        case ErrorCode::io:
            return MCMIL_ERR_IO;
        default:
            return MCMIL_ERR_NUMERIC;
    }
}

template <class Fn>
mcmil_status guarded(Fn&& fn) {
    try {
        fn();
        last_error.clear();
        return MCMIL_OK;
    } catch (const mcmil::Error& e) {
        last_error = std::string(mcmil::to_string(e.code())) + ": " + e.what();
        return status_for(e.code());
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return MCMIL_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return MCMIL_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown exception";
        return MCMIL_ERR_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    if (p == nullptr) mcmil::fail(mcmil::ErrorCode::parameter, std::string(what) + " is null");
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

mcmil::ExperimentConfig parse_config(const char* text) {
    if (text == nullptr || *text == '\0') return mcmil::ExperimentConfig{};
    return mcmil::config_from_json_text(text);
}

}  // namespace

extern "C" {

const char* mcmil_version(void) { return mcmil::kArtifactVersion; }

const char* mcmil_last_error(void) { return last_error.c_str(); }

const char* mcmil_status_name(mcmil_status status) {
    switch (status) {
        case MCMIL_OK: return "ok";
        case MCMIL_ERR_INVALID_ARGUMENT: return "invalid_argument";
        case MCMIL_ERR_CONFIG: return "config";
        case MCMIL_ERR_DIMENSION: return "dimension";
        case MCMIL_ERR_NUMERIC: return "numeric";
        case MCMIL_ERR_DIVERGED: return "diverged";
        case MCMIL_ERR_IO: return "io";
        case MCMIL_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

void mcmil_string_free(char* s) { std::free(s); }

int mcmil_exit_code(mcmil_status status) {
    switch (status) {
        case MCMIL_OK: return 0;
        case MCMIL_ERR_INVALID_ARGUMENT:
        case MCMIL_ERR_CONFIG: return 1;
        default: return 2;
    }
}

mcmil_status mcmil_dataset_generate(const char* config_json, uint64_t seed, int threads, mcmil_dataset** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        const mcmil::ExperimentConfig c = parse_config(config_json);
        mcmil::BagSpec spec = c.dataset;
        spec.seed = seed;
        auto ds = std::make_unique<mcmil_dataset>();
        ds->bags = mcmil::generate_bags(spec, threads);
        *out = ds.release();
    });
}

mcmil_status mcmil_dataset_load(const char* path, mcmil_dataset** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = nullptr;
        auto ds = std::make_unique<mcmil_dataset>();
        ds->bags = mcmil::read_bags_ndjson(path);
        *out = ds.release();
    });
}

mcmil_status mcmil_dataset_save(const mcmil_dataset* ds, const char* path) {
    return guarded([&] {
        need(ds, "dataset");
        need(path, "path");
        mcmil::write_bags_ndjson(ds->bags, path);
    });
}

mcmil_status mcmil_dataset_size(const mcmil_dataset* ds, size_t* n_bags) {
    return guarded([&] {
        need(ds, "dataset");
        need(n_bags, "n_bags");
        *n_bags = ds->bags.size();
    });
}

mcmil_status mcmil_dataset_slice(const mcmil_dataset* ds, size_t begin, size_t end, mcmil_dataset** out) {
    return guarded([&] {
        need(ds, "dataset");
        need(out, "out");
        *out = nullptr;
        mcmil::require(begin < end && end <= ds->bags.size(), mcmil::ErrorCode::parameter,
                       "dataset_slice: need begin < end <= size");
        auto s = std::make_unique<mcmil_dataset>();
        s->bags.assign(ds->bags.begin() + static_cast<std::ptrdiff_t>(begin),
                       ds->bags.begin() + static_cast<std::ptrdiff_t>(end));
        *out = s.release();
    });
}

void mcmil_dataset_free(mcmil_dataset* ds) { delete ds; }

mcmil_status mcmil_model_load(const char* path, mcmil_model** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = nullptr;
        auto [params, norm] = mcmil::load_checkpoint(path);
        *out = new mcmil_model{std::move(params), norm};
    });
}

mcmil_status mcmil_model_save(const mcmil_model* model, const char* path) {
    return guarded([&] {
        need(model, "model");
        need(path, "path");
        mcmil::save_checkpoint(model->params, model->normalizer, path);
    });
}

void mcmil_model_free(mcmil_model* model) { delete model; }

mcmil_status mcmil_train(const char* config_json, uint64_t seed, const mcmil_dataset* train,
                         const mcmil_dataset* val, int threads, mcmil_model** out, char** history_ndjson) {
    return guarded([&] {
        need(train, "train dataset");
        need(val, "validation dataset");
        need(out, "out");
        *out = nullptr;
        if (history_ndjson != nullptr) *history_ndjson = nullptr;
        const mcmil::ExperimentConfig c = parse_config(config_json);
        mcmil::TrainConfig tc = c.train;
        tc.seed = seed;
        tc.threads = threads;
        mcmil::TrainResult r = mcmil::train(c.model, tc, train->bags, val->bags);
        if (history_ndjson != nullptr) {
            std::string text;
            for (const auto& line : mcmil::run_log_records(r.history)) text += line + "\n";
            *history_ndjson = dup_string(text);
        }
        *out = new mcmil_model{std::move(r.model), r.normalizer};
    });
}

mcmil_status mcmil_evaluate(const mcmil_model* model, const mcmil_dataset* ds, int threads, char** report_json) {
    return guarded([&] {
        need(model, "model");
        need(ds, "dataset");
        need(report_json, "report_json");
        *report_json = nullptr;
        const mcmil::EvalReport rep = mcmil::evaluate(model->params, ds->bags, threads);
        json bags = json::array();
        for (const auto& b : rep.bags) {
            std::vector<double> probs(b.probabilities.data(), b.probabilities.data() + b.probabilities.size());
            bags.push_back({{"label", b.label},
                            {"predicted", b.predicted},
                            {"d_out", b.d_out},
                            {"d_feat", b.d_feat},
                            {"probabilities", probs}});
        }
        json j = {{"accuracy", rep.accuracy}, {"confusion", rep.confusion}, {"bags", bags}};
        *report_json = dup_string(j.dump());
    });
}

mcmil_status mcmil_margins_csv(const mcmil_model* model, const mcmil_dataset* ds, const char* config_json,
                               uint64_t seed, int threads, char** csv) {
    return guarded([&] {
        need(model, "model");
        need(ds, "dataset");
        need(csv, "csv");
        *csv = nullptr;
        const mcmil::ExperimentConfig c = parse_config(config_json);
        mcmil::MarginOptions opts;
        opts.p_norm = c.margins.p_norm;
        opts.estimate_input = c.margins.estimate_input;
        opts.input.direction_budget = c.margins.direction_budget;
        opts.input.tol = c.margins.tol;
        opts.seed = seed;
        const auto reps = mcmil::margin_reports(model->params, ds->bags, model->normalizer, c.train.margin, opts,
                                                threads);
        std::ostringstream out;
        out.precision(17);
        out << "bag_id,predicted,label,d_out,d_feat,d_in_estimate,omega\n";
        for (std::size_t i = 0; i < reps.size(); ++i) {
            const auto& r = reps[i];
            out << i << ',' << r.predicted << ',' << r.label << ',' << r.d_out << ',' << r.d_feat << ',';
            if (r.d_in_estimate) out << *r.d_in_estimate;
            out << ',' << r.omega << '\n';
        }
        *csv = dup_string(out.str());
    });
}

mcmil_status mcmil_stats_report(const char* pred_a, const char* pred_b, const char* config_json, uint64_t seed,
                                int threads, char** report_json) {
    return guarded([&] {
        need(pred_a, "pred_a");
        need(report_json, "report_json");
        *report_json = nullptr;
        const mcmil::ExperimentConfig c = parse_config(config_json);
        const mcmil::PredictionTable a = mcmil::read_predictions_csv(pred_a);
        std::optional<mcmil::PredictionTable> b;
        if (pred_b != nullptr) b = mcmil::read_predictions_csv(pred_b);
        *report_json = dup_string(mcmil::stats_report(a, b ? &*b : nullptr, c.stats, seed, threads));
    });
}

mcmil_status mcmil_selftest(mcmil_selftest_callback callback, void* user, int* n_failed) {
    return guarded([&] {
        const auto checks = mcmil::run_selftest([&](const mcmil::SelfTestCheck& c) {
            if (callback != nullptr) callback(c.name.c_str(), c.passed ? 1 : 0, c.detail.c_str(), user);
        });
        int failed = 0;
        for (const auto& c : checks) failed += c.passed ? 0 : 1;
        if (n_failed != nullptr) *n_failed = failed;
    });
}

mcmil_status mcmil_run(const char* subcommand, const mcmil_run_options* o) {
    return guarded([&] {
        need(subcommand, "subcommand");
        need(o, "options");
        need(o->out_dir, "out_dir");
        mcmil::ExperimentConfig c = parse_config(o->config_json);
        mcmil::Overrides ov;
        if (o->seed != nullptr) ov.seed = *o->seed;
        if (o->loss_mode != nullptr) {
            try {
                ov.loss_mode = mcmil::loss_mode_from_string(o->loss_mode);
            } catch (const mcmil::Error& e) {
                mcmil::fail(mcmil::ErrorCode::config, e.what());
            }
        }
        mcmil::apply_overrides(c, ov);
        const int threads = o->threads > 0 ? o->threads : 1;
        const std::string cmd = subcommand;
        if (cmd == "generate") {
            mcmil::run_generate(c, o->out_dir, threads);
        } else if (cmd == "train") {
            mcmil::run_train(c, o->out_dir, threads);
        } else if (cmd == "tune") {
            mcmil::run_tune(c, o->out_dir, threads);
        } else if (cmd == "margins") {
            if (o->model_path == nullptr) mcmil::fail(mcmil::ErrorCode::config, "margins: --model is required");
            mcmil::run_margins(c, o->model_path, o->out_dir, threads);
        } else if (cmd == "evaluate") {
            if (o->model_path == nullptr) mcmil::fail(mcmil::ErrorCode::config, "evaluate: --model is required");
            mcmil::run_evaluate(c, o->model_path, o->out_dir, threads);
        } else if (cmd == "stats") {
            if (o->pred_a == nullptr) mcmil::fail(mcmil::ErrorCode::config, "stats: --pred is required");
            std::optional<std::string> b;
            if (o->pred_b != nullptr) b = o->pred_b;
            mcmil::run_stats(c, o->pred_a, b, o->out_dir, threads);
        } else if (cmd == "ablate") {
            mcmil::run_ablate(c, o->out_dir, threads);
        } else {
            mcmil::fail(mcmil::ErrorCode::config, "unknown subcommand '" + cmd + "'");
        }
    });
}

}  // extern "C"
