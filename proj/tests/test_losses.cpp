#include <doctest.h>

#include <cmath>

#include "mcmil/losses.hpp"

using namespace mcmil;

namespace {

Matrix random_matrix(int r, int c, Rng& rng) {
    Matrix m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

std::vector<int> random_labels(int n, int k, Rng& rng) {
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(k)));
    return y;
}

double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

double supcon_naive(const Matrix& f, const std::vector<int>& y, double tau, bool exclude_self) {
    const int n = static_cast<int>(f.rows());
    double total = 0;
    for (int i = 0; i < n; ++i) {
        double num = 0, den = 0;
        bool any = false;
        for (int j = 0; j < n; ++j) {
            if (exclude_self && i == j) continue;
            const double e = std::exp(cosine(f.row(i), f.row(j)) / tau);
            den += e;
            if (y[i] == y[j]) {
                num += e;
                any = true;
            }
        }
        if (any) total -= std::log(num / den);
    }
    return total / n;
}

double pf_naive(const Matrix& v, const std::vector<int>& y, const Matrix& vp) {
    const int n = static_cast<int>(v.rows());
    double total = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double c = cosine(v.row(i), vp.row(j));
            const double f = std::abs(c) * (1 + c) / 2;
            total += y[i] == y[j] ? 1 - f : f;
        }
    return total / (n * (n - 1.0));
}

}  // namespace

TEST_CASE("cross entropy against log-softmax and its gradient") {
    Rng rng(1);
    const Matrix l = random_matrix(6, 4, rng);
    const std::vector<int> y = random_labels(6, 4, rng);
    Matrix onehot = Matrix::Zero(6, 4);
    double want = 0;
    for (int i = 0; i < 6; ++i) {
        onehot(i, y[i]) = 1;
        want -= l(i, y[i]) - std::log(l.row(i).array().exp().sum());
    }
    CHECK(cross_entropy(l, onehot) == doctest::Approx(want).epsilon(1e-13));
    CHECK(cross_entropy_terms(l, y).sum() == doctest::Approx(want).epsilon(1e-13));

    const Vector coef = Vector::LinSpaced(6, 0.5, 2.0);
    const Matrix g = cross_entropy_grad(l, y, coef);
    for (int i = 0; i < 6; ++i) {
        const Vector p = (l.row(i).array().exp() / l.row(i).array().exp().sum()).matrix().transpose();
        Vector expect = p;
        expect[y[i]] -= 1;
        CHECK((g.row(i).transpose() - coef[i] * expect).norm() < 1e-13);
    }
}

TEST_CASE("cross entropy is stable for large logits") {
    Matrix l(1, 3);
    l << 1000.0, 0.0, -1000.0;
    const std::vector<int> y{0};
    CHECK(cross_entropy_terms(l, y)[0] == doctest::Approx(0.0));
    const std::vector<int> y2{2};
    CHECK(cross_entropy_terms(l, y2)[0] == doctest::Approx(2000.0));
}

TEST_CASE("supcon matches the naive formula and its gradient") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(8));
        const Matrix f = random_matrix(n, 5, rng);
        const std::vector<int> y = random_labels(n, 3, rng);
        const double tau = 0.1 + rng.uniform();
        for (bool excl : {false, true}) {
            CHECK(supcon_loss(f, y, tau, excl) == doctest::Approx(supcon_naive(f, y, tau, excl)).epsilon(1e-12));
            const Vector coef = Vector::Ones(n) + Vector::LinSpaced(n, 0.0, 1.0);
            const Matrix g = supcon_grad(f, y, tau, excl, coef);
            const auto obj = [&](const Vector& flat) {
                const Matrix m = Eigen::Map<const Matrix>(flat.data(), n, 5);
                return coef.dot(supcon_terms(m, y, tau, excl));
            };
            CHECK(grad_check(obj, Eigen::Map<const Vector>(f.data(), f.size()),
                             Eigen::Map<const Vector>(g.data(), g.size())) < 1e-7);
        }
    }
}

TEST_CASE("pf_loss matches the naive double sum, stays in [0, 1], and its gradient checks") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(8));
        const Matrix v = random_matrix(n, 4, rng);
        const Matrix vp = v + 0.7 * random_matrix(n, 4, rng);
        const std::vector<int> y = random_labels(n, 3, rng);
        const double loss = pf_loss(v, y, vp);
        CHECK(loss == doctest::Approx(pf_naive(v, y, vp)).epsilon(1e-12));
        CHECK(loss >= 0.0);
        CHECK(loss <= 1.0);
        const Vector coef = Vector::LinSpaced(n, 1.0, 1.5);
        const PfGradient g = pf_grad(v, y, vp, coef);
        const auto fv = [&](const Vector& flat) {
            return coef.dot(pf_terms(Eigen::Map<const Matrix>(flat.data(), n, 4), y, vp));
        };
        const auto fp = [&](const Vector& flat) {
            return coef.dot(pf_terms(v, y, Eigen::Map<const Matrix>(flat.data(), n, 4)));
        };
        CHECK(grad_check(fv, Eigen::Map<const Vector>(v.data(), v.size()),
                         Eigen::Map<const Vector>(g.features.data(), g.features.size())) < 1e-6);
        CHECK(grad_check(fp, Eigen::Map<const Vector>(vp.data(), vp.size()),
                         Eigen::Map<const Vector>(g.perturbed.data(), g.perturbed.size())) < 1e-6);
    }
}

TEST_CASE("fidelity and compatibility boundary values") {
    Vector v(3), o(3);
    v << 1.0, 2.0, -0.5;
    o << 2.0, -1.0, 0.0;
    CHECK(fidelity(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(fidelity(v, -v) == 0.0);
    CHECK(fidelity(v, o) == 0.0);
    CHECK(tissue_compat(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(tissue_compat(v, -v) == 0.0);
    CHECK(tissue_compat(v, o) == 0.5);
    CHECK(fidelity(v, 3.0 * v) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("structure tensor recovers the sensitivity direction up to sign") {
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        Vector g(6);
        for (int k = 0; k < 6; ++k) g[k] = rng.normal();
        const Matrix s = structure_tensor(g);
        CHECK((s - g * g.transpose()).norm() == 0.0);
        const Vector r = principal_direction(s);
        CHECK(std::min((r - g).norm(), (r + g).norm()) < 1e-10 * g.norm());
    }
}

TEST_CASE("batch covariance") {
    Rng rng(5);
    const Matrix f = random_matrix(20, 3, rng);
    const Matrix centered = f.rowwise() - f.colwise().mean();
    const Matrix want = centered.transpose() * centered / 19.0;
    CHECK((batch_covariance(f, 0.0) - want).norm() < 1e-13);
    CHECK((batch_covariance(f, 1e-3) - want - 1e-3 * Matrix::Identity(3, 3)).norm() < 1e-13);

    const Matrix small = random_matrix(3, 5, rng);
    const Matrix c = batch_covariance(small, 0.0);
    CHECK((c - Matrix(c.diagonal().asDiagonal())).norm() == 0.0);
    CHECK(batch_covariance(small.topRows(1), 1e-8).isApprox(1e-8 * Matrix::Identity(5, 5)));
}

TEST_CASE("perturbation noise covariance is beta^2 Sigma") {
    Matrix sigma(3, 3);
    sigma << 1.0, 0.3, 0.0, 0.3, 0.5, 0.1, 0.0, 0.1, 0.8;
    Rng rng(6);
    PerturbationContext ctx{Vector::Zero(3), sigma, &rng};
    const Vector v = Vector::Ones(3);
    const double beta = 0.3;
    Matrix acc = Matrix::Zero(3, 3);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const Vector d = perturb(v, ctx, 0.0, beta) - v;
        acc += d * d.transpose();
    }
    acc /= n;
    CHECK((acc - beta * beta * sigma).norm() / (beta * beta * sigma).norm() < 0.05);

    Vector g(3);
    g << 1.0, -1.0, 2.0;
    ctx.grad = g;
    CHECK((perturb(v, ctx, 0.5, 0.0) - (v + 0.5 * g)).norm() == 0.0);
}

TEST_CASE("total_loss is the omega-weighted lambda sum") {
    const Vector ce = Vector::LinSpaced(4, 1.0, 2.0), con = Vector::LinSpaced(4, 0.1, 0.4),
                 pf = Vector::LinSpaced(4, 0.2, 0.5), omega = Vector::LinSpaced(4, 1.0, 1.5);
    LossWeights w;
    double want = 0;
    for (int i = 0; i < 4; ++i) want += omega[i] * (0.7 * ce[i] + 0.2 * con[i] + 0.1 * pf[i]);
    CHECK(total_loss(ce, con, pf, w, omega) == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("loss modes") {
    const LossWeights w;
    const LossWeights ce = effective_weights(w, LossMode::ce);
    CHECK(ce.lambda_ce == 0.7);
    CHECK(ce.lambda_con == 0.0);
    CHECK(ce.lambda_pf == 0.0);
    const LossWeights cc = effective_weights(w, LossMode::ce_con);
    CHECK(cc.lambda_con == 0.2);
    CHECK(cc.lambda_pf == 0.0);
    const LossWeights full = effective_weights(w, LossMode::ce_con_pf);
    CHECK(full.lambda_pf == 0.1);
    for (LossMode m : {LossMode::ce, LossMode::ce_con, LossMode::ce_con_pf}) {
        CHECK(loss_mode_from_string(to_string(m)) == m);
    }
    CHECK_THROWS_AS(loss_mode_from_string("pf"), Error);
}

TEST_CASE("loss weight validation") {
    LossWeights w;
    w.tau_con = 0.0;
    CHECK_THROWS_AS(w.validate(), Error);
    LossWeights n;
    n.lambda_ce = -0.1;
    CHECK_THROWS_AS(n.validate(), Error);
}
