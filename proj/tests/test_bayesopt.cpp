#include <doctest.h>

#include <cmath>

#include "mcmil/bayesopt.hpp"

using namespace mcmil;

namespace {

double frac(double x) { return x - std::floor(x); }

Vector vec1(double x) { return Vector::Constant(1, x); }

}  // namespace

TEST_CASE("GP posterior matches the two-observation closed form") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + static_cast<int>(rng.uniform_index(3));
        Vector x1(d), x2(d), q(d), ls(d);
        for (int i = 0; i < d; ++i) {
            x1[i] = rng.uniform();
            x2[i] = rng.uniform();
            q[i] = rng.uniform();
            ls[i] = 0.1 + rng.uniform();
        }
        const double s = 0.5 + rng.uniform(), n = 1e-4 * (1 + rng.uniform());
        const double y1 = rng.normal(), y2 = rng.normal();
        auto k = [&](const Vector& a, const Vector& b) {
            return s * std::exp(-0.5 * ((a - b).array() / ls.array()).square().sum());
        };
        const double a = s + n, c = k(x1, x2), det = a * a - c * c;
        const double k1 = k(q, x1), k2 = k(q, x2);
        const double w1 = (a * k1 - c * k2) / det, w2 = (a * k2 - c * k1) / det;
        const double mean = w1 * y1 + w2 * y2;
        const double var = s - (k1 * w1 + k2 * w2);

        Vector ys(2);
        ys << y1, y2;
        const GaussianProcess gp({x1, x2}, ys, GpKernel{ls, s, n});
        const GpPosterior p = gp.predict(q);
        CHECK(std::abs(p.mean - mean) <= 1e-10);
        CHECK(std::abs(p.variance - std::max(0.0, var)) <= 1e-10);
    }
}

TEST_CASE("GP log marginal likelihood of one observation") {
    const double s = 1.3, n = 0.01, y = 0.7;
    const GaussianProcess gp({vec1(0.2)}, vec1(y), GpKernel{vec1(0.5), s, n});
    const double v = s + n;
    CHECK(gp.log_marginal_likelihood() ==
          doctest::Approx(-0.5 * y * y / v - 0.5 * std::log(v) - 0.5 * std::log(2 * M_PI)).epsilon(1e-12));
}

TEST_CASE("expected improvement closed form") {
    const double phi0 = 0.3989422804014327;
    CHECK(expected_improvement(1.0, 1.0, 1.0) == doctest::Approx(phi0).epsilon(1e-12));
    CHECK(expected_improvement(0.0, 4.0, 0.0) == doctest::Approx(2.0 * phi0).epsilon(1e-12));
    CHECK(expected_improvement(2.0, 0.0, 1.0) == 0.0);
    CHECK(expected_improvement(0.5, 0.0, 1.0) == doctest::Approx(0.5));
    for (double mu : {-1.0, -0.3, 0.0, 0.4, 2.0}) {
        for (double var : {0.01, 0.5, 3.0}) {
            const double sd = std::sqrt(var), z = (0.2 - mu) / sd;
            const double want = (0.2 - mu) * 0.5 * std::erfc(-z / std::sqrt(2.0)) +
                                sd * std::exp(-0.5 * z * z) / std::sqrt(2 * M_PI);
            const double ei = expected_improvement(mu, var, 0.2);
            CHECK(ei == doctest::Approx(want).epsilon(1e-10).scale(1e-14));
            CHECK(ei >= 0.0);
            CHECK(expected_improvement(mu, var * 2.0, 0.2) >= ei);
        }
    }
}

TEST_CASE("scrambled Halton is a shifted Halton sequence") {
    Rng rng(3);
    const auto pts = scrambled_halton(64, 2, rng);
    REQUIRE(pts.size() == 64u);
    // Raw base-2 / base-3 radical inverses of indices 1..3.
    const double b2[] = {0.5, 0.25, 0.75};
    const double b3[] = {1.0 / 3.0, 2.0 / 3.0, 1.0 / 9.0};
    for (int i = 1; i < 3; ++i) {
        CHECK(frac(pts[i][0] - pts[0][0]) == doctest::Approx(frac(b2[i] - b2[0])));
        CHECK(frac(pts[i][1] - pts[0][1]) == doctest::Approx(frac(b3[i] - b3[0])));
    }
    for (const auto& p : pts) {
        CHECK((p.array() >= 0.0).all());
        CHECK((p.array() < 1.0).all());
    }
    // Low discrepancy: every quarter of the first axis gets 16 of 64 points.
    int quarters[4] = {0, 0, 0, 0};
    for (const auto& p : pts) ++quarters[static_cast<int>(p[0] * 4)];
    for (int q : quarters) CHECK(std::abs(q - 16) <= 1);
}

TEST_CASE("search space mapping") {
    const SearchSpace s = SearchSpace::margin_defaults();
    CHECK(s.size() == 5u);
    CHECK(SearchSpace::margin_defaults(true).size() == 6u);
    Vector u(5);
    u << 0.0, 0.25, 0.5, 0.75, 1.0;
    const Vector x = s.from_unit(u);
    for (int i = 0; i < 5; ++i) {
        const auto& d = s.dims[static_cast<std::size_t>(i)];
        CHECK(x[i] == doctest::Approx(d.lower + u[i] * (d.upper - d.lower)));
    }
    CHECK((s.to_unit(x) - u).norm() < 1e-14);
    SearchSpace bad{{SearchDim{"a", 1.0, 1.0}}};
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("fitted kernel stays in its box and interpolates") {
    Rng rng(4);
    std::vector<Vector> xs;
    Vector ys(12);
    for (int i = 0; i < 12; ++i) {
        xs.push_back(vec1(i / 11.0));
        ys[i] = std::sin(6.0 * i / 11.0);
    }
    const GpKernel k = fit_kernel(xs, ys, rng);
    CHECK(k.length_scales[0] >= kMinLengthScale);
    CHECK(k.length_scales[0] <= kMaxLengthScale);
    CHECK(k.signal_var >= kMinSignalVar);
    CHECK(k.signal_var <= kMaxSignalVar);
    CHECK(k.noise_var >= kMinNoiseVar);
    CHECK(k.noise_var <= kMaxNoiseVar);
    const GaussianProcess gp(xs, ys, k);
    for (int i = 0; i < 12; ++i) CHECK(std::abs(gp.predict(xs[static_cast<std::size_t>(i)]).mean - ys[i]) < 0.05);
}

TEST_CASE("bo_optimize on a 1-D quadratic keeps consistent traces") {
    SearchSpace space{{SearchDim{"x", 0.0, 1.0}}};
    BoOptions opt;
    opt.n_init = 5;
    opt.n_iter = 12;
    Rng rng(5);
    std::size_t observed = 0;
    const BOState st = bo_optimize([](const Vector& x) { return (x[0] - 0.37) * (x[0] - 0.37); }, space, opt,
                                   rng, [&](const BOState&, std::size_t) { ++observed; });
    CHECK(st.observations.size() == 17u);
    CHECK(st.ei_trace.size() == 12u);
    CHECK(st.incumbent_trace.size() == 17u);
    CHECK(observed == 17u);
    for (std::size_t i = 1; i < st.incumbent_trace.size(); ++i) {
        CHECK(st.incumbent_trace[i] <= st.incumbent_trace[i - 1]);
    }
    CHECK(std::abs(space.from_unit(st.best().x)[0] - 0.37) < 0.05);
}

TEST_CASE("bo_optimize is seeded") {
    SearchSpace space{{SearchDim{"x", -1.0, 2.0}, SearchDim{"y", 0.0, 1.0}}};
    BoOptions opt;
    opt.n_init = 4;
    opt.n_iter = 4;
    const Objective f = [](const Vector& x) { return x.squaredNorm(); };
    Rng a(9), b(9);
    const BOState sa = bo_optimize(f, space, opt, a), sb = bo_optimize(f, space, opt, b);
    for (std::size_t i = 0; i < sa.observations.size(); ++i) {
        CHECK(sa.observations[i].x == sb.observations[i].x);
    }
}

TEST_CASE("failed evaluations do not become the incumbent") {
    SearchSpace space{{SearchDim{"x", 0.0, 1.0}}};
    BoOptions opt;
    opt.n_init = 6;
    opt.n_iter = 4;
    Rng rng(2);
    const BOState st = bo_optimize(
        [](const Vector& x) { return x[0] < 0.5 ? std::numeric_limits<double>::quiet_NaN() : x[0]; }, space, opt,
        rng);
    CHECK(std::isfinite(st.best().value));
    CHECK(st.best().value >= 0.5);
}
