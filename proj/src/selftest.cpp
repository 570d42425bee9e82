#include "mcmil/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mcmil/bayesopt.hpp"
#include "mcmil/experiment.hpp"
#include "mcmil/losses.hpp"
#include "mcmil/margins.hpp"
#include "mcmil/model.hpp"
#include "mcmil/numerics.hpp"
#include "mcmil/stats.hpp"
#include "mcmil/synthdata.hpp"
#include "mcmil/trainer.hpp"

namespace mcmil {

namespace {

constexpr double kE = 2.718281828459045;

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
    Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

Matrix empirical_cov(const std::vector<Vector>& xs) {
    const Eigen::Index d = xs.front().size();
    Vector m = Vector::Zero(d);
    for (const auto& x : xs) m += x;
    m /= static_cast<double>(xs.size());
    Matrix c = Matrix::Zero(d, d);
    for (const auto& x : xs) c += (x - m) * (x - m).transpose();
    return c / static_cast<double>(xs.size() - 1);
}

// Linear bag classifier on the flattened (row-major) bag, for input-margin
// examples with a closed-form answer.
BagScorer linear_scorer(const Matrix& w, const Vector& b) {
    BagScorer s;
    s.logits = [w, b](const Matrix& x) {
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = x;
        return Vector(w * Eigen::Map<const Vector>(rm.data(), rm.size()) + b);
    };
    s.input_gradient = [w](const Matrix& x, const Vector& coeffs) {
        const Vector g = w.transpose() * coeffs;
        Matrix out(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = g[i * x.cols() + j];
        }
        return out;
    };
    return s;
}

ModelParams tiny_model(int in, int hidden, int latent, int attn, int classes, Pooling pooling) {
    ModelDims d;
    d.in_dim = in;
    d.hidden = hidden;
    d.latent = latent;
    d.attn_hidden = attn;
    d.n_classes = classes;
    d.pooling = pooling;
    return ModelParams::zeros(d);
}

// Nearly-linear encoder (latent ~ patch) under mean pooling with a
// nearest-prototype head.
ModelParams prototype_model(const Matrix& protos) {
    const auto k = static_cast<int>(protos.rows());
    const auto d = static_cast<int>(protos.cols());
    ModelParams p = tiny_model(d, d, d, 1, k, Pooling::mean);
    p.enc_w1 = 1e-3 * Matrix::Identity(d, d);
    p.enc_w2 = 1e3 * Matrix::Identity(d, d);
    p.head_w = protos;
    p.head_b = -0.5 * protos.rowwise().squaredNorm();
    return p;
}

bool same_history(const RunHistory& a, const RunHistory& b) {
    if (a.steps.size() != b.steps.size() || a.epochs.size() != b.epochs.size()) return false;
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        if (a.steps[i].loss.total != b.steps[i].loss.total || a.steps[i].loss.ce != b.steps[i].loss.ce) return false;
    }
    for (std::size_t i = 0; i < a.epochs.size(); ++i) {
        if (a.epochs[i].val_accuracy != b.epochs[i].val_accuracy ||
            a.epochs[i].mean_d_out != b.epochs[i].mean_d_out || a.epochs[i].train.total != b.epochs[i].train.total) {
            return false;
        }
    }
    return a.best_epoch == b.best_epoch && a.stopping_epoch == b.stopping_epoch;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string drop_first_line(const std::string& s) {
    const auto pos = s.find('\n');
    return pos == std::string::npos ? std::string() : s.substr(pos + 1);
}

class Runner {
public:
    explicit Runner(const SelfTestReporter& reporter) : reporter_(reporter) {}

    template <class Fn>
    void check(const std::string& name, Fn&& fn) {
        SelfTestCheck c;
        c.name = name;
        try {
            c.passed = fn();
            if (!c.passed) c.detail = "condition not met";
        } catch (const std::exception& e) {
            c.passed = false;
            c.detail = std::string("exception: ") + e.what();
        }
        if (reporter_) reporter_(c);
        results_.push_back(std::move(c));
    }

    template <class Fn>
    void check_throws(const std::string& name, ErrorCode code, Fn&& fn) {
        check(name, [&] {
            try {
                fn();
            } catch (const Error& e) {
                return e.code() == code;
            }
            return false;
        });
    }

    std::vector<SelfTestCheck> take() { return std::move(results_); }

private:
    const SelfTestReporter& reporter_;
    std::vector<SelfTestCheck> results_;
};

void numerics_checks(Runner& r) {
    r.check("numerics/cholesky identity", [] {
        return cholesky_psd(Matrix::Identity(3, 3)).lower.isApprox(Matrix::Identity(3, 3), 0.0);
    });
    r.check("numerics/cholesky diagonal", [] {
        const Matrix l = cholesky_psd(rows({{4, 0}, {0, 9}})).lower;
        return l(0, 0) == 2.0 && l(1, 1) == 3.0 && l(1, 0) == 0.0;
    });
    r.check("numerics/cholesky reconstruction", [] {
        const Matrix a = rows({{2, 1}, {1, 2}});
        const Matrix l = cholesky_psd(a).lower;
        return (l * l.transpose() - a).cwiseAbs().maxCoeff() < 1e-12;
    });
    r.check("numerics/mvn zero covariance", [] {
        Rng rng(1);
        const Vector m = vec({1.5, -2.0});
        for (const auto& x : sample_mvn(m, Matrix::Zero(2, 2), 100, rng)) {
            if (x != m) return false;
        }
        return true;
    });
    r.check("numerics/mvn empirical covariance", [] {
        Rng rng(2);
        const auto xs = sample_mvn(Vector::Zero(3), Matrix::Identity(3, 3), 100000, rng);
        return (empirical_cov(xs) - Matrix::Identity(3, 3)).norm() < 0.05 * Matrix::Identity(3, 3).norm();
    });
    r.check("numerics/mvn determinism", [] {
        Rng a(3), b(3);
        const Matrix c = rows({{2, 0.5}, {0.5, 1}});
        return sample_mvn(Vector::Zero(2), c, 50, a) == sample_mvn(Vector::Zero(2), c, 50, b);
    });
    r.check("numerics/grad_check constant", [] {
        return grad_check([](const Vector&) { return 3.0; }, vec({1, 2}), Vector::Zero(2)) == 0.0;
    });
    r.check("numerics/grad_check quadratic", [] {
        const Vector x = vec({0.3, -1.2, 2.5});
        return grad_check([](const Vector& v) { return 0.5 * v.squaredNorm(); }, x, x, 1e-5) < 1e-8;
    });
    r.check("numerics/grad_check linear", [] {
        const Vector a = vec({1.0, -2.0, 0.5});
        return grad_check([a](const Vector& v) { return a.dot(v); }, vec({0.1, 0.2, 0.3}), a) < 1e-10;
    });
}

void synthdata_checks(Runner& r) {
    r.check("synthdata/zero rates", [] {
        BagSpec s;
        s.n_bags = 40;
        s.noise_tile_rate = s.label_noise_rate = s.pattern_mix_rate = 0.0;
        for (const auto& b : generate_bags(s)) {
            if (b.label != b.true_label) return false;
            if (std::any_of(b.noise_mask.begin(), b.noise_mask.end(), [](bool m) { return m; })) return false;
        }
        return true;
    });
    r.check("synthdata/label noise fraction", [] {
        BagSpec s;
        s.n_bags = 10000;
        s.patches_per_bag = 4;
        s.label_noise_rate = 0.2;
        s.seed = 11;
        const auto bags = generate_bags(s);
        const auto flipped = std::count_if(bags.begin(), bags.end(), [](const PatchBag& b) { return b.label != b.true_label; });
        const double f = static_cast<double>(flipped) / static_cast<double>(bags.size());
        return f >= 0.18 && f <= 0.22;
    });
    r.check("synthdata/identity shift", [] {
        BagSpec s;
        s.n_bags = 10;
        const auto plain = generate_bags(s);
        s.domain_shift = DomainShift{Matrix::Identity(s.feature_dim, s.feature_dim), Vector::Zero(s.feature_dim)};
        const auto shifted = generate_bags(s);
        for (std::size_t i = 0; i < plain.size(); ++i) {
            if (plain[i].patches != shifted[i].patches) return false;
        }
        return true;
    });
}

void model_checks(Runner& r) {
    r.check("model/zero weights give zero latent", [] {
        const ModelParams p = tiny_model(4, 3, 2, 2, 2, Pooling::attention);
        return encode_patch(vec({1, -2, 3, 0.5}), p).isZero(0.0);
    });
    ModelParams unit = tiny_model(1, 1, 1, 1, 2, Pooling::attention);
    unit.enc_w1(0, 0) = 1.0;
    unit.enc_w2(0, 0) = 1.0;
    r.check("model/1-1-1 network at origin", [&] { return encode_patch(vec({0.0}), unit)[0] == 0.0; });
    r.check("model/1-1-1 network at one (linear latent)",
            [&] { return near(encode_patch(vec({1.0}), unit)[0], std::tanh(1.0), 1e-15); });
    r.check("model/attention singleton", [] {
        const ModelParams p = tiny_model(2, 2, 2, 2, 2, Pooling::attention);
        const Matrix u = rows({{0.3, -0.7}});
        const AttentionPool a = attention_pool(u, p);
        return a.weights.size() == 1 && a.weights[0] == 1.0 && a.z == u.row(0).transpose();
    });
    r.check("model/attention identical latents uniform", [] {
        ModelDims d;
        d.latent = 3;
        Rng rng(4);
        const ModelParams p = ModelParams::initialize(d, rng);
        const Matrix u = Matrix::Ones(5, 3) * 0.4;
        const AttentionPool a = attention_pool(u, p);
        return (a.weights.array() - 0.2).abs().maxCoeff() < 1e-15;
    });
    r.check("model/attention hand softmax", [] {
        ModelParams p = tiny_model(1, 1, 1, 1, 2, Pooling::attention);
        p.attn_v(0, 0) = 1.0;
        p.attn_w[0] = 1.0 / std::tanh(1.0);
        const AttentionPool a = attention_pool(rows({{1.0}, {0.0}}), p);
        return near(a.weights[0], kE / (kE + 1.0), 1e-12) && near(a.weights[1], 1.0 / (kE + 1.0), 1e-12) &&
               near(a.weights[0], 0.7311, 1e-4);
    });
    r.check("model/head zero map", [] {
        const ModelParams p = tiny_model(2, 2, 2, 1, 3, Pooling::attention);
        return classify(vec({0.5, 2.0}), p).isZero(0.0);
    });
    r.check("model/head bias passthrough", [] {
        ModelParams p = tiny_model(2, 2, 2, 1, 3, Pooling::attention);
        p.head_b = vec({1, 2, 3});
        return classify(vec({0.5, 2.0}), p) == vec({1, 2, 3});
    });
    r.check("model/head identity weights", [] {
        ModelParams p = tiny_model(2, 2, 2, 1, 2, Pooling::attention);
        p.head_w = Matrix::Identity(2, 2);
        return classify(vec({0.5, -0.25}), p) == vec({0.5, -0.25});
    });
}

void margin_checks(Runner& r) {
    r.check("margins/logit margin top-2", [] {
        const LogitMargin m = logit_margin(vec({3, 1, 0}));
        return m.predicted == 0 && m.d_out == 2.0;
    });
    r.check("margins/logit margin tie", [] {
        const LogitMargin m = logit_margin(vec({1, 1}));
        return m.predicted == 0 && m.d_out == 0.0;
    });
    r.check("margins/logit margin top tie lowest index", [] {
        const LogitMargin m = logit_margin(vec({-1, 4, 3.5, 4}));
        return m.predicted == 1 && m.d_out == 0.0;
    });
    const Matrix w = rows({{1, 0}, {-1, 0}});
    const Vector b0 = Vector::Zero(2);
    r.check("margins/feature margin hand value", [&] {
        const FeatureMargins f = feature_margins(vec({1, 0}), w, b0);
        return f.pairwise.size() == 1 && f.pairwise[0].other == 1 && near(f.pairwise[0].distance, 1.0, 1e-15) &&
               near(f.d_feat, 1.0, 1e-15);
    });
    r.check("margins/feature margin on boundary", [&] { return feature_margins(vec({0, 0.7}), w, b0).d_feat == 0.0; });
    r.check("margins/feature margin affine in t", [&] {
        for (double t : {0.0, 0.5, 1.0, 2.5, 7.0}) {
            if (!near(feature_margins(vec({t, 0}), w, b0).d_feat, t, 1e-12)) return false;
        }
        return true;
    });
    r.check("margins/omega at tau_m", [] { return near(margin_weight(0.4, 0.8, 0.4, 0.1), 1.4, 1e-15); });
    r.check("margins/omega gamma zero", [] {
        for (double d : {0.0, 0.3, 1.0}) {
            if (margin_weight(d, 0.0, 0.5, 0.1) != 1.0) return false;
        }
        return true;
    });
    r.check("margins/omega hand sigmoid", [] {
        const double expected = 1.0 + 1.0 / (1.0 + std::exp(3.0));
        return near(margin_weight(0.8, 1.0, 0.5, 0.1), expected, 1e-12) && near(expected, 1.0474, 1e-4);
    });
    InputMarginOptions opts;
    opts.direction_budget = 4;
    opts.tol = 1e-4;
    r.check("margins/input margin on boundary", [&] {
        const Matrix w2 = rows({{1, 0, 0, 0}, {0, 1, 0, 0}});
        Rng rng(1);
        return estimate_input_margin(linear_scorer(w2, Vector::Zero(2)), rows({{0.3, 0.3}, {1, -1}}), opts, rng) <=
               opts.tol;
    });
    const Matrix lw = rows({{1, 2, 0, -1}, {-1, 0, 1, 1}});
    const Vector lb = vec({0.5, -0.5});
    const Matrix bag = rows({{1, 0.5}, {-0.2, 0.3}});
    r.check("margins/input margin linear closed form", [&] {
        const Vector x = vec({1, 0.5, -0.2, 0.3});
        const Vector l = lw * x + lb;
        const double exact = std::abs(l[0] - l[1]) / (lw.row(0) - lw.row(1)).norm();
        Rng rng(2);
        const double est = estimate_input_margin(linear_scorer(lw, lb), bag, opts, rng);
        return est >= exact - 1e-12 && est <= exact + opts.tol;
    });
    r.check("margins/input margin invariant to head scaling", [&] {
        Rng a(3), b(3);
        return estimate_input_margin(linear_scorer(lw, lb), bag, opts, a) ==
               estimate_input_margin(linear_scorer(2.0 * lw, 2.0 * lb), bag, opts, b);
    });
    r.check("margins/kendall perfect", [] {
        const std::vector<double> x{1, 2, 3};
        return kendall_tau(x, x) == 1.0;
    });
    r.check("margins/kendall reversed", [] {
        const std::vector<double> x{1, 2, 3}, y{3, 2, 1};
        return kendall_tau(x, y) == -1.0;
    });
    r.check("margins/kendall brute-force value", [] {
        const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
        return near(kendall_tau(x, y), 4.0 / 6.0, 1e-15);
    });
    r.check("margins/separation auroc perfect", [] {
        return margin_separation_auroc(std::vector<double>{0.1, 0.2, 0.9, 1.0}, {false, false, true, true}) == 1.0;
    });
    r.check("margins/separation auroc ties", [] {
        return margin_separation_auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, {false, true, false, true}) == 0.5;
    });
    r.check("margins/separation auroc hand value", [] {
        // Cross pairs for flags (0,0,1,1): 0.35 beats 0.1, loses to 0.4; 0.8 beats both.
        const std::vector<double> d{0.1, 0.4, 0.35, 0.8};
        return margin_separation_auroc(d, {false, false, true, true}) == 0.75 &&
               margin_separation_auroc(d, {false, true, false, true}) == 1.0;
    });
    r.check("margins/neural collapse zero within", [] {
        const std::vector<int> y{0, 0, 1, 1};
        return neural_collapse_index(rows({{0, 1}, {0, 1}, {2, 3}, {2, 3}}), y) == 0.0;
    });
    r.check("margins/neural collapse hand scatter", [] {
        const std::vector<int> y{0, 0, 1, 1};
        return near(neural_collapse_index(rows({{-1}, {1}, {1}, {3}}), y), 1.0, 1e-15);
    });
    r.check("margins/neural collapse scale invariant", [] {
        const std::vector<int> y{0, 1, 0, 1, 2};
        const Matrix z = rows({{0.1, 2}, {1, -1}, {0.4, 1.5}, {1.2, -0.3}, {3, 3}});
        return near(neural_collapse_index(z, y), neural_collapse_index(3.7 * z, y), 1e-12);
    });
}

void loss_checks(Runner& r) {
    r.check("losses/ce perfect prediction", [] {
        return cross_entropy(rows({{1000, 0, 0}}), rows({{1, 0, 0}})) == 0.0;
    });
    r.check("losses/ce uniform", [] {
        return near(cross_entropy(Matrix::Zero(1, 5), rows({{0, 0, 1, 0, 0}})), std::log(5.0), 1e-14);
    });
    r.check("losses/ce hand value", [] {
        const double s1 = 1.0 / (1.0 + std::exp(-1.0));
        const double expected = -std::log(s1) - std::log(1.0 - s1);
        return near(cross_entropy(rows({{1, 0}, {0, 1}}), rows({{1, 0}, {1, 0}})), expected, 1e-14) &&
               near(expected, 1.62652, 1e-5);
    });
    r.check("losses/supcon single class", [] {
        const std::vector<int> y{2, 2, 2};
        return near(supcon_loss(rows({{1, 0}, {0.3, 2}, {-1, 0.4}}), y, 0.5), 0.0, 1e-14);
    });
    r.check("losses/supcon permutation invariant", [] {
        const Matrix f = rows({{1, 0.2}, {0.3, 2}, {-1, 0.4}, {0.5, -0.5}});
        const std::vector<int> y{0, 1, 0, 1};
        const Matrix g = rows({{0.5, -0.5}, {-1, 0.4}, {1, 0.2}, {0.3, 2}});
        const std::vector<int> yg{1, 0, 0, 1};
        return near(supcon_loss(f, y, 0.5), supcon_loss(g, yg, 0.5), 1e-14);
    });
    r.check("losses/supcon hand value", [] {
        const std::vector<int> y{0, 1};
        const double expected = std::log(1.0 + std::exp(-1.0));
        return near(supcon_loss(rows({{1, 0}, {0, 1}}), y, 1.0), expected, 1e-14) && near(expected, 0.31326, 1e-5);
    });
    const Vector v = vec({0.3, -1.2, 2.0});
    r.check("losses/tissue compat identical", [&] { return near(tissue_compat(v, v), 1.0, 1e-15); });
    r.check("losses/tissue compat antiparallel", [&] { return near(tissue_compat(v, -v), 0.0, 1e-15); });
    r.check("losses/tissue compat orthogonal", [] { return tissue_compat(vec({1, 0}), vec({0, 3})) == 0.5; });
    r.check("losses/fidelity identical", [&] { return near(fidelity(v, v), 1.0, 1e-15); });
    r.check("losses/fidelity orthogonal", [] { return fidelity(vec({1, 0}), vec({0, 3})) == 0.0; });
    r.check("losses/fidelity antiparallel", [&] { return near(fidelity(v, -v), 0.0, 1e-15); });
    r.check("losses/structure tensor basis", [] {
        const Matrix s = structure_tensor(vec({1, 0, 0}));
        Matrix e = Matrix::Zero(3, 3);
        e(0, 0) = 1.0;
        return s == e;
    });
    r.check("losses/structure tensor trace", [&] { return near(structure_tensor(v).trace(), v.squaredNorm(), 1e-14); });
    r.check("losses/structure tensor hand value", [] {
        return structure_tensor(vec({1, 2})) == rows({{1, 2}, {2, 4}});
    });
    r.check("losses/perturb identity", [&] {
        PerturbationContext ctx{vec({1, 1, 1}), Matrix::Identity(3, 3), nullptr};
        return perturb(v, ctx, 0.0, 0.0) == v;
    });
    r.check("losses/perturb deterministic branch", [] {
        PerturbationContext ctx{vec({1, 0}), Matrix::Identity(2, 2), nullptr};
        return perturb(vec({0, 0}), ctx, 0.5, 0.0) == vec({0.5, 0.0});
    });
    r.check("losses/perturb noise covariance", [] {
        Rng rng(9);
        const Matrix sigma = rows({{1.0, 0.3, 0.0}, {0.3, 2.0, -0.4}, {0.0, -0.4, 0.5}});
        PerturbationContext ctx{Vector::Zero(3), sigma, &rng};
        const double beta = 0.3;
        const Vector base = vec({1, 2, 3});
        std::vector<Vector> d;
        d.reserve(100000);
        for (int i = 0; i < 100000; ++i) d.push_back(perturb(base, ctx, 0.0, beta) - base);
        const Matrix target = beta * beta * sigma;
        return (empirical_cov(d) - target).norm() < 0.05 * target.norm();
    });
    r.check("losses/pf one class perfect", [] {
        const Matrix f = rows({{1, 2}, {1, 2}, {1, 2}});
        const std::vector<int> y{0, 0, 0};
        return near(pf_loss(f, y, f), 0.0, 1e-15);
    });
    r.check("losses/pf ideal geometry", [] {
        const Matrix f = rows({{1, 0}, {2, 0}, {0, 1}, {0, 3}});
        const std::vector<int> y{0, 0, 1, 1};
        return near(pf_loss(f, y, f), 0.0, 1e-15);
    });
    r.check("losses/pf hand value", [] {
        const Matrix f = rows({{1, 0}, {0, 1}});
        const std::vector<int> y{0, 0};
        return near(pf_loss(f, y, f), 1.0, 1e-15);
    });
    const Vector ce = vec({0.3, 1.2, 0.7}), con = vec({0.1, 0.2, 0.05}), pf = vec({0.4, 0.0, 0.9});
    const Vector ones = Vector::Ones(3);
    r.check("losses/fusion degenerate", [&] {
        LossWeights w;
        w.lambda_ce = 1.0;
        w.lambda_con = w.lambda_pf = 0.0;
        return near(total_loss(ce, con, pf, w, ones), ce.sum(), 1e-15);
    });
    r.check("losses/fusion convex equal parts", [] {
        return near(total_loss(vec({1}), vec({1}), vec({1}), LossWeights{}, vec({1})), 1.0, 1e-15);
    });
    r.check("losses/fusion linear in omega", [&] {
        const Vector om = vec({1.0, 1.3, 1.7});
        return near(total_loss(ce, con, pf, LossWeights{}, 2.0 * om), 2.0 * total_loss(ce, con, pf, LossWeights{}, om),
                    1e-14);
    });
}

void bayesopt_checks(Runner& r) {
    GpKernel k;
    k.length_scales = vec({0.2});
    k.signal_var = 1.5;
    k.noise_var = 0.0;
    r.check("bayesopt/gp interpolates", [&] {
        GaussianProcess gp({vec({0.1}), vec({0.6})}, vec({0.4, -1.0}), k);
        const GpPosterior p = gp.predict(vec({0.6}));
        return near(p.mean, -1.0, 1e-8) && p.variance < 1e-8;
    });
    r.check("bayesopt/gp reverts to prior", [&] {
        GaussianProcess gp({vec({0.1}), vec({0.6})}, vec({0.4, -1.0}), k);
        const GpPosterior p = gp.predict(vec({0.6 + 10 * 0.2 + 1.0}));
        return near(p.mean, 0.0, 1e-6) && near(p.variance, 1.5, 1e-6);
    });
    r.check("bayesopt/gp two-point closed form", [] {
        GpKernel kk;
        kk.length_scales = vec({0.3});
        kk.signal_var = 2.0;
        kk.noise_var = 0.01;
        const double x1 = 0.2, x2 = 0.5, y1 = 1.0, y2 = -0.5, q = 0.35;
        auto kf = [&](double a, double b) { return kk.signal_var * std::exp(-0.5 * (a - b) * (a - b) / 0.09); };
        const double a = kf(x1, x1) + kk.noise_var, b = kf(x1, x2), d = kf(x2, x2) + kk.noise_var;
        const double det = a * d - b * b;
        const double i11 = d / det, i12 = -b / det, i22 = a / det;
        const double k1 = kf(q, x1), k2 = kf(q, x2);
        const double mean = k1 * (i11 * y1 + i12 * y2) + k2 * (i12 * y1 + i22 * y2);
        const double var = kf(q, q) - (k1 * (i11 * k1 + i12 * k2) + k2 * (i12 * k1 + i22 * k2));
        GaussianProcess gp({vec({x1}), vec({x2})}, vec({y1, y2}), kk);
        const GpPosterior p = gp.predict(vec({q}));
        return near(p.mean, mean, 1e-10) && near(p.variance, var, 1e-10);
    });
    r.check("bayesopt/ei zero variance", [] { return expected_improvement(0.5, 0.0, 0.3) == 0.0; });
    r.check("bayesopt/ei phi(0)", [] {
        return near(expected_improvement(0.7, 1.0, 0.7), 1.0 / std::sqrt(2.0 * std::acos(-1.0)), 1e-12);
    });
    r.check("bayesopt/ei monotone in s", [] {
        double prev = -1.0;
        for (double s = 0.0; s <= 3.0; s += 0.25) {
            const double ei = expected_improvement(1.0, s * s, 0.8);
            if (ei < prev) return false;
            prev = ei;
        }
        return true;
    });
    SearchSpace line;
    line.dims = {{"x", 0.0, 1.0, false}};
    const Objective quad = [](const Vector& x) { return (x[0] - 0.37) * (x[0] - 0.37); };
    r.check("bayesopt/quadratic minimiser 9 of 10 seeds", [&] {
        int hits = 0;
        for (std::uint64_t s = 1; s <= 10; ++s) {
            Rng rng(s);
            const BOState st = bo_optimize(quad, line, BoOptions{}, rng);
            hits += std::abs(line.from_unit(st.best().x)[0] - 0.37) <= 0.05 ? 1 : 0;
        }
        return hits >= 9;
    });
    BoOptions small;
    small.n_init = 5;
    small.n_iter = 8;
    r.check("bayesopt/points respect bounds", [&] {
        const SearchSpace space = SearchSpace::margin_defaults(true);
        bool ok = true;
        const Objective f = [&](const Vector& x) {
            for (std::size_t d = 0; d < space.size(); ++d) {
                const double v = x[static_cast<Eigen::Index>(d)];
                ok = ok && v >= space.dims[d].lower && v <= space.dims[d].upper;
            }
            return x.sum();
        };
        Rng rng(5);
        bo_optimize(f, space, small, rng);
        return ok;
    });
    r.check("bayesopt/determinism", [&] {
        Rng a(6), b(6);
        const BOState sa = bo_optimize(quad, line, small, a);
        const BOState sb = bo_optimize(quad, line, small, b);
        for (std::size_t i = 0; i < sa.observations.size(); ++i) {
            if (sa.observations[i].x != sb.observations[i].x || sa.observations[i].value != sb.observations[i].value) {
                return false;
            }
        }
        return sa.observations.size() == sb.observations.size();
    });
}

void trainer_checks(Runner& r) {
    BagSpec clean;
    clean.n_bags = 150;
    clean.patches_per_bag = 16;
    clean.class_separation = 8.0;
    clean.noise_tile_rate = clean.label_noise_rate = clean.pattern_mix_rate = 0.0;
    clean.seed = 3;
    const auto bags = generate_bags(clean);
    const std::vector<PatchBag> train_set(bags.begin(), bags.begin() + 100), val_set(bags.begin() + 100, bags.end());
    r.check("trainer/separable data reaches 100%", [&] {
        const Matrix protos = class_prototypes(clean);
        for (const auto& b : bags) {
            if (nearest_prototype(b, protos) != b.label) return false;
        }
        TrainConfig c;
        c.learning_rate = 1e-2;
        c.max_epochs = 50;
        c.patience = 50;
        const TrainResult res = train(ModelDims{}, c, train_set, val_set);
        return evaluate(res.model, val_set).accuracy == 1.0;
    });
    TrainConfig quick;
    quick.learning_rate = 1e-2;
    quick.max_epochs = 3;
    quick.patience = 3;
    r.check("trainer/ce mode equals full mode with (1,0,0)", [&] {
        TrainConfig a = quick;
        a.loss_mode = LossMode::ce;
        TrainConfig b = quick;
        b.loss_mode = LossMode::ce_con_pf;
        b.loss_weights.lambda_ce = 1.0;
        b.loss_weights.lambda_con = b.loss_weights.lambda_pf = 0.0;
        a.loss_weights = b.loss_weights;
        a.loss_weights.lambda_con = 0.7;  // ignored by the ce mode
        const TrainResult ra = train(ModelDims{}, a, train_set, val_set);
        const TrainResult rb = train(ModelDims{}, b, train_set, val_set);
        return same_history(ra.history, rb.history) && ra.model.flatten() == rb.model.flatten();
    });
    r.check("trainer/identical runs", [&] {
        const TrainResult ra = train(ModelDims{}, quick, train_set, val_set);
        const TrainResult rb = train(ModelDims{}, quick, train_set, val_set);
        return same_history(ra.history, rb.history) && ra.model.flatten() == rb.model.flatten();
    });
    const ModelParams oracle = prototype_model(class_prototypes(clean));
    r.check("trainer/evaluate perfect classifier", [&] {
        const EvalReport e = evaluate(oracle, bags);
        for (std::size_t i = 0; i < e.confusion.size(); ++i) {
            for (std::size_t j = 0; j < e.confusion.size(); ++j) {
                if (i != j && e.confusion[i][j] != 0) return false;
            }
        }
        return e.accuracy == 1.0;
    });
    r.check("trainer/evaluate constant predictor", [&] {
        ModelParams p = oracle;
        p.head_w.setZero();
        p.head_b = vec({1, 0, 0, 0, 0});
        const EvalReport e = evaluate(p, bags);
        return std::abs(e.accuracy - 0.2) <= 1.0 / static_cast<double>(bags.size()) + 1e-12;
    });
    r.check("trainer/evaluate order invariant", [&] {
        std::vector<PatchBag> rev(bags.rbegin(), bags.rend());
        ModelDims d;
        Rng rng(8);
        const ModelParams p = ModelParams::initialize(d, rng);
        const EvalReport a = evaluate(p, bags), b = evaluate(p, rev);
        for (std::size_t i = 0; i < bags.size(); ++i) {
            if (a.bags[i].predicted != b.bags[bags.size() - 1 - i].predicted) return false;
        }
        return a.accuracy == b.accuracy && a.confusion == b.confusion;
    });
}

void stats_checks(Runner& r) {
    r.check("stats/bootstrap constant data", [] {
        Rng rng(1);
        const Interval ci = bootstrap_ci(std::vector<double>{4.2, 4.2, 4.2}, 500, 0.95, rng);
        return ci.lo == 4.2 && ci.hi == 4.2;
    });
    r.check("stats/bootstrap n=3 exhaustive", [] {
        // All 27 resamples of (1, 2, 3), each with probability 1/27.
        std::vector<double> means;
        for (int a = 1; a <= 3; ++a)
            for (int b = 1; b <= 3; ++b)
                for (int c = 1; c <= 3; ++c) means.push_back((a + b + c) / 3.0);
        std::sort(means.begin(), means.end());
        // The 2.5% and 97.5% points of the exact distribution are its extremes.
        const double lo = means.front(), hi = means.back();
        Rng rng(2);
        const Interval ci = bootstrap_ci(std::vector<double>{1, 2, 3}, 20000, 0.95, rng);
        return ci.lo == lo && ci.hi == hi;
    });
    r.check("stats/bootstrap determinism", [] {
        const std::vector<double> x{0.3, 1.2, 0.8, 2.2, 1.9};
        Rng a(3), b(3);
        const Interval ia = bootstrap_ci(x, 300, 0.9, a), ib = bootstrap_ci(x, 300, 0.9, b, 4);
        return ia.lo == ib.lo && ia.hi == ib.hi;
    });
    auto paired = [](int b, int c) {
        std::vector<PairedPrediction> p;
        for (int i = 0; i < b; ++i) p.push_back({0, 0, 1});
        for (int i = 0; i < c; ++i) p.push_back({0, 1, 0});
        p.push_back({1, 1, 1});
        return p;
    };
    r.check("stats/mcnemar symmetric", [&] {
        const McNemarResult m = mcnemar(paired(4, 4));
        return m.chi2 == 0.0 && m.p == 1.0;
    });
    r.check("stats/mcnemar statistic", [&] { return near(mcnemar(paired(10, 2)).chi2, 64.0 / 12.0, 1e-14); });
    r.check("stats/mcnemar p via erfc series", [&] {
        const double x = std::sqrt((64.0 / 12.0) / 2.0);
        // erfc(x) = 1 - 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
        double sum = 0.0, term = x;
        for (int n = 0; n < 80; ++n) {
            sum += term / (2 * n + 1);
            term *= -x * x / (n + 1);
        }
        const double oracle = 1.0 - 2.0 / std::sqrt(std::acos(-1.0)) * sum;
        const double p = mcnemar(paired(10, 2)).p;
        return near(p, oracle, 1e-6) && near(p, 0.02092, 1e-5);
    });
    r.check("stats/fisher most probable table", [] { return near(fisher_exact({{{1, 1}, {1, 1}}}), 1.0, 1e-12); });
    r.check("stats/fisher enumeration value", [] {
        return near(fisher_exact({{{5, 0}, {0, 5}}}), 2.0 / 252.0, 1e-12);
    });
    r.check("stats/fisher transpose symmetry", [] {
        return fisher_exact({{{3, 7}, {2, 9}}}) == fisher_exact({{{9, 2}, {7, 3}}});
    });
    r.check("stats/cohens d null", [] {
        return cohens_d(std::vector<double>{1, 2, 3}, std::vector<double>{3, 1, 2}) == 0.0;
    });
    r.check("stats/cohens d antisymmetric", [] {
        const std::vector<double> a{0.3, 1.1, 2.5}, b{2.0, 2.2, 3.9, 1.0};
        return cohens_d(a, b) == -cohens_d(b, a);
    });
    r.check("stats/cohens d hand value", [] {
        const double d = cohens_d(std::vector<double>{0, 0, 2, 2}, std::vector<double>{1, 1, 3, 3});
        return near(d, -1.0 / std::sqrt(4.0 / 3.0), 1e-14) && near(d, -0.8660, 1e-4);
    });
    r.check("stats/levene identical groups", [] {
        const LeveneResult l = levene({{1, 2, 4}, {1, 2, 4}});
        return l.w == 0.0 && l.p == 1.0;
    });
    r.check("stats/levene scaled copy", [] { return levene({{1, 2, 4, 7}, {10, 20, 40, 70}}).w > 0.0; });
    r.check("stats/levene hand groups", [] {
        const std::vector<std::vector<double>> g{{0, 1, 2}, {0, 5, 10}};
        const std::vector<double> med{1, 5};
        std::vector<std::vector<double>> z(2);
        double grand = 0.0;
        for (int i = 0; i < 2; ++i) {
            for (double x : g[i]) {
                z[i].push_back(std::abs(x - med[i]));
                grand += std::abs(x - med[i]);
            }
        }
        grand /= 6.0;
        double between = 0.0, within = 0.0;
        for (int i = 0; i < 2; ++i) {
            const double m = (z[i][0] + z[i][1] + z[i][2]) / 3.0;
            between += 3.0 * (m - grand) * (m - grand);
            for (double v : z[i]) within += (v - m) * (v - m);
        }
        const double w = (6.0 - 2.0) / (2.0 - 1.0) * between / within;
        return near(levene(g).w, w, 1e-10);
    });
    r.check("stats/auc separated", [] {
        return roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0;
    });
    r.check("stats/auc ties", [] {
        return roc_auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}) == 0.5;
    });
    r.check("stats/auc hand value", [] {
        return roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75;
    });
    r.check("stats/cap perfect ranking", [] {
        return near(cap_curve(std::vector<double>{0.9, 0.8, 0.2, 0.1, 0.05}, std::vector<int>{1, 1, 0, 0, 0})
                        .accuracy_ratio,
                    1.0, 1e-12);
    });
    r.check("stats/cap random scores", [] {
        Rng rng(12);
        std::vector<double> s(10000, 1.0);
        std::vector<int> y(10000);
        for (auto& v : y) v = rng.uniform() < 0.3 ? 1 : 0;
        return std::abs(cap_curve(s, y).accuracy_ratio) < 0.1;
    });
    r.check("stats/cap monotone to (1,1)", [] {
        const CapCurve c =
            cap_curve(std::vector<double>{0.3, 0.7, 0.7, 0.1, 0.5, 0.9}, std::vector<int>{0, 1, 0, 1, 1, 0});
        for (std::size_t i = 1; i < c.points.size(); ++i) {
            if (c.points[i].first < c.points[i - 1].first || c.points[i].second < c.points[i - 1].second) return false;
        }
        return c.points.back().first == 1.0 && c.points.back().second == 1.0;
    });
    r.check("stats/per-class diagonal", [] {
        for (const auto& m : per_class_metrics({{3, 0, 0}, {0, 4, 0}, {0, 0, 2}})) {
            if (m.sensitivity != 1.0 || m.specificity != 1.0 || m.ppv != 1.0 || m.npv != 1.0) return false;
        }
        return true;
    });
    r.check("stats/per-class empty class", [] {
        return !per_class_metrics({{3, 1}, {0, 0}})[1].sensitivity.has_value();
    });
    r.check("stats/per-class hand counts", [] {
        const ClassMetrics m = per_class_metrics({{8, 2}, {1, 9}})[0];
        return near(*m.sensitivity, 0.8, 1e-15) && near(*m.specificity, 0.9, 1e-15) &&
               near(*m.ppv, 8.0 / 9.0, 1e-15) && near(*m.npv, 9.0 / 11.0, 1e-15);
    });
    r.check("stats/cv constant", [] { return coefficient_of_variation(std::vector<double>{5, 5, 5}) == 0.0; });
    r.check("stats/cv hand value", [] {
        return near(coefficient_of_variation(std::vector<double>{90, 100, 110}), 10.0, 1e-12);
    });
    r.check("stats/cv scale invariant", [] {
        const std::vector<double> a{1.5, 2.0, 3.1}, b{4.5, 6.0, 9.3};
        return near(coefficient_of_variation(a), coefficient_of_variation(b), 1e-12);
    });
}

void cli_checks(Runner& r) {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() /
        ("mcmil-selftest-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    ExperimentConfig c;
    c.dataset.n_bags = 24;
    c.dataset.patches_per_bag = 8;
    c.n_val = 8;
    c.train.learning_rate = 1e-2;
    c.train.max_epochs = 2;
    c.train.patience = 2;
    c.train.batch_size = 8;
    c.seeds = {1, 2, 3, 4, 5};
    r.check("cli/ablate writes a 3-row table", [&] {
        const fs::path out = root / "ablate";
        run_ablate(c, out.string(), 2);
        std::ifstream in(out / "ablation.csv");
        std::string header, line;
        std::getline(in, header);
        int n = 0;
        while (std::getline(in, line)) n += line.empty() ? 0 : 1;
        return n == 3 && header.find("mean_accuracy") != std::string::npos &&
               header.find("std_accuracy") != std::string::npos;
    });
    r.check("cli/train reruns give identical logs", [&] {
        ExperimentConfig one = c;
        one.seeds = {7};
        run_train(one, (root / "t1").string(), 1);
        run_train(load_config((root / "t1" / "manifest.json").string()), (root / "t2").string(), 2);
        const std::string a = read_file(root / "t1" / "run_log.ndjson");
        const std::string b = read_file(root / "t2" / "run_log.ndjson");
        return !a.empty() && drop_first_line(a) == drop_first_line(b);
    });
    std::error_code ec;
    fs::remove_all(root, ec);
}

}  // namespace

std::vector<SelfTestCheck> run_selftest(const SelfTestReporter& reporter) {
    Runner r(reporter);
    numerics_checks(r);
    synthdata_checks(r);
    model_checks(r);
    margin_checks(r);
    loss_checks(r);
    bayesopt_checks(r);
    trainer_checks(r);
    stats_checks(r);
    cli_checks(r);
    return r.take();
}

}  // namespace mcmil
