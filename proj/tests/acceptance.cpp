// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mcmil/bayesopt.hpp"
#include "mcmil/experiment.hpp"
#include "mcmil/losses.hpp"
#include "mcmil/margins.hpp"
#include "mcmil/stats.hpp"
#include "mcmil/trainer.hpp"

using namespace mcmil;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int worker_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

Matrix gaussian(int r, int c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// ---- 1 -------------------------------------------------------------------

Outcome gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_term;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        BagSpec spec;
        spec.n_bags = 8;
        spec.patches_per_bag = 16;
        spec.seed = seed;
        const auto bags = generate_bags(spec);
        std::vector<const PatchBag*> ptrs;
        std::vector<int> labels;
        for (const auto& b : bags) {
            ptrs.push_back(&b);
            labels.push_back(b.label);
        }
        ModelDims dims;
        dims.in_dim = 16;
        dims.hidden = 32;
        dims.latent = 16;
        Rng rng(seed, 100);
        const ModelParams p = ModelParams::initialize(dims, rng);
        Vector omega(8);
        for (int i = 0; i < 8; ++i) omega[i] = 1.0 + 0.5 * rng.uniform();
        const Matrix noise = gaussian(8, dims.latent, rng);

        struct Term {
            const char* name;
            LossWeights w;
            PerturbationNoise noise;
        };
        LossWeights ce, con, pf, fused;
        ce.lambda_con = ce.lambda_pf = 0.0;
        ce.lambda_ce = 1.0;
        con.lambda_ce = con.lambda_pf = 0.0;
        con.lambda_con = 1.0;
        pf.lambda_ce = pf.lambda_con = 0.0;
        pf.lambda_pf = 1.0;
        pf.beta = 0.0;
        const Term terms[] = {{"CE", ce, {}}, {"CON", con, {}}, {"PF", pf, {}}, {"T", fused, {&noise, nullptr}}};
        for (const Term& t : terms) {
            const auto f = [&](const Vector& x) {
                ModelParams q = p;
                q.assign(x);
                return batch_objective(q, ptrs, forward_batch(q, ptrs), labels, omega, t.w, t.noise).loss.total;
            };
            const BatchObjective obj = batch_objective(p, ptrs, forward_batch(p, ptrs), labels, omega, t.w, t.noise);
            const double err = grad_check(f, p.flatten(), obj.grad.flatten(), 1e-5);
            if (err > worst) {
                worst = err;
                worst_term = t.name;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 30.0,
            fmt("max rel error %.2e (L_%s) over 5 seeds x 4 losses, %.1f s", worst, worst_term.c_str(), secs)};
}

// ---- 2 -------------------------------------------------------------------

Outcome margin_oracle() {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int d = 1 + static_cast<int>(rng.uniform_index(8));
        const Matrix w = gaussian(2, d, rng);
        const Vector b = gaussian(2, 1, rng);
        const Vector z = gaussian(d, 1, rng);
        const FeatureMargins fm = feature_margins(z, w, b);
        const int y = fm.predicted;
        const Vector dw = (w.row(y) - w.row(1 - y)).transpose();
        const double want = (dw.dot(z) + b[y] - b[1 - y]) / dw.norm();
        worst = std::max(worst, std::abs(fm.d_feat - want));
    }
    bool invariants = true;
    Vector tie(3);
    tie << 2.0, 2.0, -1.0;
    const LogitMargin t = logit_margin(tie);
    invariants = invariants && t.predicted == 0 && t.d_out == 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Vector l(5);
        for (int i = 0; i < 5; ++i) l[i] = static_cast<double>(rng.uniform_index(40)) / 4.0;
        const double shift = static_cast<double>(rng.uniform_index(64)) - 32.0;
        const LogitMargin a = logit_margin(l);
        const LogitMargin s = logit_margin((l.array() + shift).matrix());
        invariants = invariants && a.predicted == s.predicted && a.d_out == s.d_out;
    }
    return {worst <= 1e-10 && invariants,
            fmt("max |d_feat - closed form| = %.1e on 100 heads; tie/shift invariants %s", worst,
                invariants ? "exact" : "violated")};
}

// ---- 3 -------------------------------------------------------------------

Outcome symmetric_head() {
    double worst = 1.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        BagSpec spec;
        spec.n_bags = 200;
        spec.patches_per_bag = 16;
        spec.seed = seed;
        const auto bags = generate_bags(spec);
        ModelDims dims;
        Rng rng(seed, 200);
        ModelParams p = ModelParams::initialize(dims, rng);
        BagSpec simplex;
        simplex.n_classes = dims.n_classes;
        simplex.feature_dim = dims.latent;
        simplex.class_separation = 1.7;
        p.head_w = class_prototypes(simplex);
        p.head_b.setZero();
        const EvalReport r = evaluate(p, bags);
        std::vector<double> feat, out;
        for (const auto& s : r.bags) {
            feat.push_back(s.d_feat);
            out.push_back(s.d_out);
        }
        worst = std::min(worst, kendall_tau(feat, out));
    }
    return {worst == 1.0, fmt("min kendall(d_feat, d_out) over 3 datasets = %.17g", worst)};
}

// ---- shared training runs for 4-7 -----------------------------------------

struct RunResult {
    double accuracy = 0.0;
    double mean_d_out = 0.0;
    double kendall = 0.0;
    double separation_auroc = 0.0;
};

TrainConfig benchmark_config(std::uint64_t seed, LossMode mode) {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.max_epochs = 100;
    c.patience = 30;
    c.batch_size = 25;
    c.seed = seed;
    c.loss_mode = mode;
    c.threads = worker_threads();
    return c;
}

RunResult benchmark_run(std::uint64_t seed, LossMode mode, double noise_tile_rate, Pooling pooling,
                        bool with_input_margins) {
    BagSpec spec;
    spec.n_bags = 350;
    spec.seed = seed;
    spec.noise_tile_rate = noise_tile_rate;
    const auto bags = generate_bags(spec, worker_threads());
    const std::vector<PatchBag> tr(bags.begin(), bags.begin() + 250), va(bags.begin() + 250, bags.end());
    ModelDims dims;
    dims.pooling = pooling;
    const TrainConfig config = benchmark_config(seed, mode);
    const TrainResult result = train(dims, config, tr, va);
    const EvalReport ev = evaluate(result.model, va, worker_threads());
    RunResult r;
    r.accuracy = ev.accuracy;
    std::vector<double> d_out, d_feat;
    for (const auto& b : ev.bags) {
        d_out.push_back(b.d_out);
        d_feat.push_back(b.d_feat);
        r.mean_d_out += b.d_out / static_cast<double>(ev.bags.size());
    }
    r.kendall = kendall_tau(d_feat, d_out);
    if (with_input_margins) {
        MarginOptions mo;
        mo.seed = seed;
        const auto reports = margin_reports(result.model, va, result.normalizer, config.margin, mo, worker_threads());
        std::vector<double> d_in;
        for (const auto& m : reports) d_in.push_back(*m.d_in_estimate);
        std::vector<double> sorted = d_in;
        std::sort(sorted.begin(), sorted.end());
        const double median = quantile_sorted(sorted, 0.5);
        std::vector<bool> robust;
        for (double x : d_in) robust.push_back(!(x < median));
        r.separation_auroc = margin_separation_auroc(d_out, robust);
    }
    return r;
}

std::map<LossMode, std::vector<RunResult>>& benchmark_runs() {
    static std::map<LossMode, std::vector<RunResult>> runs;
    if (runs.empty()) {
        for (LossMode m : {LossMode::ce, LossMode::ce_con, LossMode::ce_con_pf}) {
            for (std::uint64_t s = 1; s <= 5; ++s) {
                runs[m].push_back(benchmark_run(s, m, 0.2, Pooling::attention, m == LossMode::ce_con_pf));
            }
        }
    }
    return runs;
}

std::string join(const std::vector<double>& v, const char* f = "%.3f") {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : " ") + fmt(f, x);
    return out;
}

// ---- 4 -------------------------------------------------------------------

Outcome margin_alignment() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> taus;
    int hits = 0;
    for (const auto& r : benchmark_runs().at(LossMode::ce_con_pf)) {
        taus.push_back(r.kendall);
        hits += r.kendall >= 0.5;
    }
    return {hits >= 4, fmt("kendall(d_feat, d_out) per seed [%s], %d/5 >= 0.5 (training + eval %.0f s)",
                           join(taus).c_str(), hits, seconds_since(t0))};
}

// ---- 5 -------------------------------------------------------------------

Outcome robust_separation() {
    std::vector<double> aucs;
    int hits = 0;
    for (const auto& r : benchmark_runs().at(LossMode::ce_con_pf)) {
        aucs.push_back(r.separation_auroc);
        hits += r.separation_auroc >= 0.85;
    }
    return {hits >= 4, fmt("AUROC of d_out for median-d_in split [%s], %d/5 >= 0.85", join(aucs).c_str(), hits)};
}

// ---- 6 -------------------------------------------------------------------

Outcome attention_margin_link() {
    const auto t0 = std::chrono::steady_clock::now();
    int margin_wins = 0, acc_wins = 0;
    std::vector<double> att, uni;
    for (std::uint64_t s = 1; s <= 5; ++s) {
        const RunResult a = benchmark_run(s, LossMode::ce_con_pf, 0.5, Pooling::attention, false);
        const RunResult u = benchmark_run(s, LossMode::ce_con_pf, 0.5, Pooling::mean, false);
        att.push_back(a.mean_d_out);
        uni.push_back(u.mean_d_out);
        margin_wins += a.mean_d_out > u.mean_d_out;
        acc_wins += a.accuracy >= u.accuracy;
    }
    return {margin_wins >= 4 && acc_wins >= 4,
            fmt("mean d_out attention [%s] vs uniform [%s]; d_out wins %d/5, accuracy >= in %d/5 (%.0f s)",
                join(att).c_str(), join(uni).c_str(), margin_wins, acc_wins, seconds_since(t0))};
}

// ---- 7 -------------------------------------------------------------------

Outcome ablation_ordering() {
    auto stats_of = [](const std::vector<RunResult>& runs) {
        std::vector<double> acc;
        for (const auto& r : runs) acc.push_back(r.accuracy);
        return std::pair{mean(acc), sample_sd(acc)};
    };
    const auto [ce_m, ce_s] = stats_of(benchmark_runs().at(LossMode::ce));
    const auto [cc_m, cc_s] = stats_of(benchmark_runs().at(LossMode::ce_con));
    const auto [full_m, full_s] = stats_of(benchmark_runs().at(LossMode::ce_con_pf));
    const double tol = 0.01;
    const bool order = full_m >= cc_m - tol && cc_m >= ce_m - tol;
    const bool absolute = full_m >= 0.90;
    const bool variance = full_s <= 1.25 * ce_s;
    return {order && absolute && variance,
            fmt("mean acc CE %.4f (sd %.4f), CE+CON %.4f (sd %.4f), CE+CON+PF %.4f (sd %.4f)", ce_m, ce_s, cc_m,
                cc_s, full_m, full_s)};
}

// ---- 8 -------------------------------------------------------------------

Outcome bo_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    SearchSpace space{{SearchDim{"x", 0.0, 1.0}}};
    const BoOptions options;
    int hits = 0;
    std::vector<double> found;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        const BOState st =
            bo_optimize([](const Vector& x) { return (x[0] - 0.37) * (x[0] - 0.37); }, space, options, rng);
        const double x = space.from_unit(st.best().x)[0];
        found.push_back(x);
        hits += std::abs(x - 0.37) <= 0.05;
    }

    const double s = 1.0, n = 1e-6, ls = 0.3, y1 = 0.4, y2 = -0.2, x1 = 0.2, x2 = 0.7, q = 0.45;
    auto k = [&](double a, double b) { return s * std::exp(-0.5 * (a - b) * (a - b) / (ls * ls)); };
    const double a = s + n, c = k(x1, x2), det = a * a - c * c;
    const double w1 = (a * k(q, x1) - c * k(q, x2)) / det, w2 = (a * k(q, x2) - c * k(q, x1)) / det;
    Vector ys(2);
    ys << y1, y2;
    const GaussianProcess gp({Vector::Constant(1, x1), Vector::Constant(1, x2)}, ys,
                             GpKernel{Vector::Constant(1, ls), s, n});
    const GpPosterior post = gp.predict(Vector::Constant(1, q));
    const double mean_err = std::abs(post.mean - (w1 * y1 + w2 * y2));
    const double var_err = std::abs(post.variance - (s - k(q, x1) * w1 - k(q, x2) * w2));

    const double phi0 = 0.398942280401432678;
    const double ei_err = std::max(std::abs(expected_improvement(0.3, 1.0, 0.3) - phi0),
                                   std::abs(expected_improvement(-1.0, 0.25, -1.0) - 0.5 * phi0));
    const double secs = seconds_since(t0);
    return {hits >= 9 && mean_err <= 1e-10 && var_err <= 1e-10 && ei_err <= 1e-9 && secs < 60.0,
            fmt("incumbents [%s], %d/10 within 0.05; GP err %.1e/%.1e; EI err %.1e; %.1f s",
                join(found).c_str(), hits, mean_err, var_err, ei_err, secs)};
}

// ---- 9 -------------------------------------------------------------------

Outcome pf_mechanics() {
    Vector v(4), o(4);
    v << 1.0, -2.0, 0.5, 3.0;
    o << 2.0, 1.0, 0.0, 0.0;
    const bool boundary = fidelity(v, -v) == 0.0 && fidelity(v, o) == 0.0 && tissue_compat(v, o) == 0.5 &&
                          tissue_compat(v, -v) == 0.0 && std::abs(fidelity(v, v) - 1.0) <= 1e-15 &&
                          std::abs(tissue_compat(v, v) - 1.0) <= 1e-15;

    Rng rng(9);
    const Matrix f = gaussian(40, 4, rng);
    const Matrix sigma = batch_covariance(f, 0.0);
    const double beta = 0.1;
    PerturbationContext ctx{Vector::Zero(4), sigma, &rng};
    Matrix acc = Matrix::Zero(4, 4);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        const Vector d = perturb(v, ctx, 0.5, beta) - v;
        acc += d * d.transpose();
    }
    const Matrix target = beta * beta * sigma;
    const double cov_err = (acc / draws - target).norm() / target.norm();

    double lo = 1.0, hi = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(10));
        const Matrix feats = gaussian(n, 6, rng);
        const Matrix pert = feats + (0.1 + 3.0 * rng.uniform()) * gaussian(n, 6, rng);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (auto& l : labels) l = static_cast<int>(rng.uniform_index(3));
        const double loss = pf_loss(feats, labels, pert);
        lo = std::min(lo, loss);
        hi = std::max(hi, loss);
    }
    return {boundary && cov_err <= 0.05 && lo >= 0.0 && hi <= 1.0,
            fmt("boundary values %s; noise covariance rel. Frobenius error %.4f; pf_loss range [%.4f, %.4f]",
                boundary ? "exact" : "wrong", cov_err, lo, hi)};
}

// ---- 10 ------------------------------------------------------------------

Outcome statistics_oracles() {
    // Fisher: Pascal-triangle enumeration of same-margin tables.
    std::vector<std::vector<unsigned long long>> pas(31);
    for (int i = 0; i <= 30; ++i) {
        pas[i].assign(static_cast<std::size_t>(i + 1), 1ULL);
        for (int j = 1; j < i; ++j) pas[i][j] = pas[i - 1][j - 1] + pas[i - 1][j];
    }
    auto binom = [&](long long n, long long k) { return k < 0 || k > n ? 0ULL : pas[n][k]; };
    double fisher_err = 0.0;
    for (int a = 0; a <= 30; ++a)
        for (int b = 0; a + b <= 30; ++b)
            for (int c = 0; a + b + c <= 30; ++c)
                for (int d = 0; a + b + c + d <= 30; ++d) {
                    if (a + b + c + d == 0) continue;
                    const long long r1 = a + b, r2 = c + d, c1 = a + c;
                    const unsigned long long obs = binom(r1, a) * binom(r2, c);
                    unsigned long long sum = 0;
                    for (long long x = 0; x <= r1; ++x) {
                        const unsigned long long w = binom(r1, x) * binom(r2, c1 - x);
                        if (w != 0 && w <= obs) sum += w;
                    }
                    const double want = static_cast<double>(sum) / static_cast<double>(binom(r1 + r2, c1));
                    fisher_err = std::max(fisher_err, std::abs(fisher_exact(Table2x2{{{a, b}, {c, d}}}) - want));
                }

    // McNemar: statistic formula and erfc Maclaurin series for the tail.
    double mcnemar_err = 0.0;
    for (int b = 0; b <= 30; ++b)
        for (int c = 0; c <= 30; ++c) {
            if (b + c == 0) continue;
            std::vector<PairedPrediction> pairs;
            for (int i = 0; i < b; ++i) pairs.push_back({1, 1, 0});
            for (int i = 0; i < c; ++i) pairs.push_back({1, 0, 1});
            const McNemarResult r = mcnemar(pairs);
            const double chi2 = static_cast<double>((b - c) * (b - c)) / (b + c);
            const long double x = std::sqrt(static_cast<long double>(chi2) / 2.0L);
            long double term = x, series = x;
            for (int k = 1; k < 400; ++k) {
                term *= -x * x / k;
                series += term / (2 * k + 1);
            }
            const long double tail = 1.0L - 2.0L / std::sqrt(3.141592653589793238462643383279502884L) * series;
            mcnemar_err = std::max({mcnemar_err, std::abs(r.chi2 - chi2), std::abs(r.p - static_cast<double>(tail))});
        }

    // Bootstrap: constant data, and the 27 equally likely resamples of (1, 2, 3).
    Rng rng(10);
    const std::vector<double> constant(12, 2.5);
    const Interval ci_const = bootstrap_ci(constant, 1000, 0.95, rng);
    bool boot_ok = ci_const.lo == 2.5 && ci_const.hi == 2.5;
    std::vector<double> exact;
    for (int a = 1; a <= 3; ++a)
        for (int b = 1; b <= 3; ++b)
            for (int c = 1; c <= 3; ++c) exact.push_back((a + b + c) / 3.0);
    std::sort(exact.begin(), exact.end());
    for (double level : {0.5, 0.9, 0.95}) {
        auto q = [&](double p) { return exact[std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(p * 27 - 1e-12))) - 1]; };
        const Interval ci = bootstrap_ci(std::vector<double>{1.0, 2.0, 3.0}, 20000, level, rng);
        boot_ok = boot_ok && std::abs(ci.lo - q((1 - level) / 2)) <= 1.0 / 3.0 + 1e-12 &&
                  std::abs(ci.hi - q(1 - (1 - level) / 2)) <= 1.0 / 3.0 + 1e-12;
    }

    // Kendall against O(n^2) counting.
    double kendall_err = 0.0;
    int kendall_cases = 0;
    while (kendall_cases < 1000) {
        const std::size_t n = 2 + rng.uniform_index(49);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = static_cast<double>(rng.uniform_index(10));
            y[i] = static_cast<double>(rng.uniform_index(10));
        }
        long long con = 0, dis = 0, tx = 0, ty = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double s = (x[i] - x[j]) * (y[i] - y[j]);
                con += s > 0;
                dis += s < 0;
                tx += x[i] == x[j];
                ty += y[i] == y[j];
            }
        const long long n0 = static_cast<long long>(n * (n - 1) / 2);
        if (n0 == tx || n0 == ty) continue;
        const double want = (con - dis) / std::sqrt(static_cast<double>(n0 - tx) * static_cast<double>(n0 - ty));
        kendall_err = std::max(kendall_err, std::abs(kendall_tau(x, y) - want));
        ++kendall_cases;
    }

    // ROC AUC against pairwise enumeration.
    double auc_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(29);
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.uniform_index(6));
            l[i] = static_cast<int>(rng.uniform_index(2));
        }
        l[0] = 0;
        l[1] = 1;
        double wins = 0, pairs = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (l[i] == 1 && l[j] == 0) {
                    pairs += 1;
                    wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
                }
        auc_err = std::max(auc_err, std::abs(roc_auc(s, l) - wins / pairs));
    }

    const bool ok = fisher_err <= 1e-12 && mcnemar_err <= 1e-6 && boot_ok && kendall_err <= 1e-12 &&
                    auc_err <= 1e-12;
    return {ok, fmt("fisher %.1e, mcnemar %.1e, bootstrap %s, kendall %.1e, auc %.1e", fisher_err, mcnemar_err,
                    boot_ok ? "ok" : "mismatch", kendall_err, auc_err)};
}

// ---- 11 ------------------------------------------------------------------

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string without_header(const std::string& log) {
    const auto nl = log.find('\n');
    return nl == std::string::npos ? std::string() : log.substr(nl + 1);
}

int cli(const std::string& args) {
    const std::string cmd = std::string("\"") + MCMIL_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

Outcome end_to_end_determinism() {
    const fs::path root = fs::temp_directory_path() /
        ("mcmil-acceptance-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(root);
    ExperimentConfig c;
    c.dataset.n_bags = 60;
    c.dataset.patches_per_bag = 16;
    c.n_val = 20;
    c.train.learning_rate = 5e-3;
    c.train.max_epochs = 4;
    c.train.patience = 4;
    c.train.batch_size = 10;
    c.seeds = {1, 2};
    {
        std::ofstream(root / "config.json") << config_to_json_text(c);
    }
    const std::string cfg = (root / "config.json").string();
    int rc = 0;
    rc |= cli("train --config \"" + cfg + "\" --seed 5 --threads 1 --out \"" + (root / "train1").string() + "\"");
    rc |= cli("train --config \"" + (root / "train1" / "manifest.json").string() + "\" --threads 4 --out \"" +
              (root / "train2").string() + "\"");
    rc |= cli("ablate --config \"" + cfg + "\" --threads 1 --out \"" + (root / "ablate1").string() + "\"");
    rc |= cli("ablate --config \"" + (root / "ablate1" / "manifest.json").string() + "\" --threads 3 --out \"" +
              (root / "ablate2").string() + "\"");

    int compared = 0, differing = 0;
    auto compare = [&](const fs::path& a, const fs::path& b, bool log) {
        const std::string x = read_file(a), y = read_file(b);
        ++compared;
        if (x.empty() || (log ? without_header(x) != without_header(y) : x != y)) ++differing;
    };
    compare(root / "train1" / "run_log.ndjson", root / "train2" / "run_log.ndjson", true);
    compare(root / "train1" / "model.json", root / "train2" / "model.json", false);
    compare(root / "ablate1" / "ablation.csv", root / "ablate2" / "ablation.csv", false);
    if (fs::exists(root / "ablate1" / "runs")) {
        for (const auto& entry : fs::directory_iterator(root / "ablate1" / "runs")) {
            const fs::path other = root / "ablate2" / "runs" / entry.path().filename();
            compare(entry.path() / "run_log.ndjson", other / "run_log.ndjson", true);
        }
    }
    std::error_code ec;
    fs::remove_all(root, ec);
    return {rc == 0 && differing == 0 && compared == 9,
            fmt("cli exit status %d; %d artifacts compared across --threads, %d differ", rc, compared, differing)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient fidelity", gradient_fidelity},
        {"closed-form margin oracle", margin_oracle},
        {"exact margin consistency on symmetric heads", symmetric_head},
        {"trained-model margin alignment", margin_alignment},
        {"robust / non-robust separation", robust_separation},
        {"attention-margin link", attention_margin_link},
        {"ablation ordering", ablation_ordering},
        {"Bayesian optimisation correctness", bo_correctness},
        {"perturbation-fidelity mechanics", pf_mechanics},
        {"statistics oracles", statistics_oracles},
        {"end-to-end determinism", end_to_end_determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
