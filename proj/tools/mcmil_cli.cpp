// Command-line front end; talks to the library only through the C API.
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "mcmil/c_api.h"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "mcmil_out";
    std::string loss_mode;
    int threads = 1;
    std::string model;
    std::string pred;
    std::string pred_b;
};

bool read_file(const std::string& path, std::string& text) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
    return true;
}

int run(const std::string& name, const Flags& f) {
    std::string config_text;
    if (!f.config.empty() && !read_file(f.config, config_text)) {
        std::cerr << "mcmil " << name << ": cannot read config '" << f.config << "'\n";
        return 1;
    }
    std::uint64_t seed = f.seed.value_or(0);
    mcmil_run_options o{};
    o.config_json = config_text.empty() ? nullptr : config_text.c_str();
    o.out_dir = f.out.c_str();
    o.seed = f.seed ? &seed : nullptr;
    o.loss_mode = f.loss_mode.empty() ? nullptr : f.loss_mode.c_str();
    o.threads = f.threads;
    o.model_path = f.model.empty() ? nullptr : f.model.c_str();
    o.pred_a = f.pred.empty() ? nullptr : f.pred.c_str();
    o.pred_b = f.pred_b.empty() ? nullptr : f.pred_b.c_str();
    const mcmil_status st = mcmil_run(name.c_str(), &o);
    if (st != MCMIL_OK) {
        std::cerr << "mcmil " << name << ": " << mcmil_last_error() << '\n';
        return mcmil_exit_code(st);
    }
    std::cout << "mcmil " << name << ": wrote " << f.out << '\n';
    return 0;
}

void on_check(const char* name, int passed, const char* detail, void*) {
    if (passed) {
        std::printf("PASS %s\n", name);
    } else {
        std::printf("FAIL %s: %s\n", name, detail);
    }
    std::fflush(stdout);
}

int selftest() {
    int failed = 0;
    const mcmil_status st = mcmil_selftest(on_check, nullptr, &failed);
    if (st != MCMIL_OK) {
        std::cerr << "mcmil selftest: " << mcmil_last_error() << '\n';
        return mcmil_exit_code(st);
    }
    std::printf("%s: %d failed\n", failed == 0 ? "selftest passed" : "selftest FAILED", failed);
    return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Margin-consistent attention MIL experiments"};
    app.set_version_flag("--version", std::string(mcmil_version()));
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "JSON config file (or a manifest.json to rerun)");
        sub->add_option("--seed", f.seed, "Seed; replaces the config's seed list");
        sub->add_option("--out", f.out, "Output directory")->capture_default_str();
        sub->add_option("--loss-mode", f.loss_mode, "ce | ce_con | ce_con_pf");
        sub->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
    };
    const char* names[] = {"generate", "train", "tune", "margins", "evaluate", "stats", "ablate"};
    const char* help[] = {"Write a synthetic dataset",
                          "Train a model; writes checkpoint and run log",
                          "Bayesian optimisation of the margin and perturbation parameters",
                          "Per-bag margin table for the validation split",
                          "Predictions of a checkpoint on the validation split",
                          "Statistics battery over prediction files",
                          "Every loss mode across every seed"};
    std::string chosen;
    for (int i = 0; i < 7; ++i) {
        CLI::App* sub = app.add_subcommand(names[i], help[i]);
        common(sub);
        const std::string n = names[i];
        if (n == "margins" || n == "evaluate") {
            sub->add_option("--model", f.model, "Checkpoint JSON")->required();
        }
        if (n == "stats") {
            sub->add_option("--pred", f.pred, "Prediction CSV")->required();
            sub->add_option("--pred-b", f.pred_b, "Second prediction CSV for paired tests");
        }
        sub->callback([&chosen, n] { chosen = n; });
    }
    app.add_subcommand("selftest", "Run the built-in worked examples")->callback([&chosen] { chosen = "selftest"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }
    if (chosen == "selftest") return selftest();
    return run(chosen, f);
}
