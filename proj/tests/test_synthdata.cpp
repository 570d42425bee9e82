#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mcmil/synthdata.hpp"

using namespace mcmil;

TEST_CASE("prototypes form a centred equidistant simplex") {
    for (int k = 2; k <= 7; ++k) {
        BagSpec spec;
        spec.n_classes = k;
        spec.feature_dim = 8;
        spec.class_separation = 2.5;
        const Matrix p = class_prototypes(spec);
        CHECK(p.rows() == k);
        CHECK(p.colwise().sum().norm() < 1e-12);
        for (int i = 0; i < k; ++i)
            for (int j = i + 1; j < k; ++j) CHECK((p.row(i) - p.row(j)).norm() == doctest::Approx(2.5).epsilon(1e-12));
    }
    BagSpec tight;
    tight.n_classes = 6;
    tight.feature_dim = 4;
    CHECK_THROWS_AS(class_prototypes(tight), Error);
}

TEST_CASE("generation is seeded and thread-count independent") {
    BagSpec spec;
    spec.n_bags = 40;
    spec.patches_per_bag = 10;
    const auto a = generate_bags(spec, 1);
    const auto b = generate_bags(spec, 4);
    REQUIRE(a.size() == 40u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].patches == b[i].patches);
        CHECK(a[i].label == b[i].label);
        CHECK(a[i].noise_mask == b[i].noise_mask);
    }
    spec.seed = 2;
    CHECK(generate_bags(spec)[0].patches != a[0].patches);
}

TEST_CASE("class balance and corruption rates") {
    BagSpec spec;
    spec.n_bags = 1000;
    spec.patches_per_bag = 40;
    const auto bags = generate_bags(spec, 2);
    std::vector<int> per_class(5, 0);
    double tiles = 0, flipped = 0;
    for (const auto& b : bags) {
        ++per_class[static_cast<std::size_t>(b.true_label)];
        for (bool m : b.noise_mask) tiles += m;
        flipped += b.label != b.true_label;
        CHECK(b.patches.rows() == 40);
        CHECK(b.patches.cols() == 16);
    }
    for (int c : per_class) CHECK(c == 200);
    const double n_tiles = 1000.0 * 40.0;
    // Binomial 4-sigma bands.
    CHECK(std::abs(tiles / n_tiles - 0.2) < 4 * std::sqrt(0.16 / n_tiles));
    CHECK(std::abs(flipped / 1000.0 - 0.05) < 4 * std::sqrt(0.0475 / 1000.0));
}

TEST_CASE("patch moments: class patches around the prototype, artifacts wider and centred") {
    BagSpec spec;
    spec.n_bags = 200;
    spec.pattern_mix_rate = 0.0;
    spec.label_noise_rate = 0.0;
    const auto bags = generate_bags(spec);
    const Matrix protos = class_prototypes(spec);
    double sum_sq_class = 0, sum_sq_tile = 0, n_class = 0, n_tile = 0;
    Vector tile_mean = Vector::Zero(16);
    for (const auto& b : bags) {
        for (Eigen::Index p = 0; p < b.patches.rows(); ++p) {
            if (b.noise_mask[static_cast<std::size_t>(p)]) {
                sum_sq_tile += b.patches.row(p).squaredNorm();
                tile_mean += b.patches.row(p).transpose();
                ++n_tile;
            } else {
                sum_sq_class += (b.patches.row(p) - protos.row(b.true_label)).squaredNorm();
                ++n_class;
            }
        }
    }
    CHECK(sum_sq_class / (16 * n_class) == doctest::Approx(1.0).epsilon(0.03));
    CHECK(sum_sq_tile / (16 * n_tile) == doctest::Approx(kNoiseTileVariance).epsilon(0.03));
    CHECK((tile_mean / n_tile).cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("mixed patches come from another class") {
    BagSpec spec;
    spec.n_bags = 50;
    spec.pattern_mix_rate = 1.0;
    spec.noise_tile_rate = 0.0;
    spec.class_separation = 40.0;
    const Matrix protos = class_prototypes(spec);
    for (const auto& b : generate_bags(spec)) {
        for (Eigen::Index p = 0; p < b.patches.rows(); ++p) {
            Eigen::Index nearest = 0;
            (protos.rowwise() - b.patches.row(p)).rowwise().squaredNorm().minCoeff(&nearest);
            CHECK(nearest != b.true_label);
        }
    }
}

TEST_CASE("nearest-prototype oracle separates clean data") {
    BagSpec spec;
    spec.n_bags = 200;
    spec.label_noise_rate = 0.0;
    const Matrix protos = class_prototypes(spec);
    int correct = 0;
    for (const auto& b : generate_bags(spec)) correct += nearest_prototype(b, protos) == b.true_label;
    CHECK(correct >= 198);
}

TEST_CASE("domain shift is an affine map of the unshifted patches") {
    BagSpec spec;
    spec.n_bags = 5;
    spec.feature_dim = 3;
    spec.n_classes = 3;
    const auto plain = generate_bags(spec);
    Matrix a(3, 3);
    a << 1.0, 0.2, 0.0, 0.0, 0.9, 0.1, -0.3, 0.0, 1.1;
    Vector t(3);
    t << 0.5, -1.0, 2.0;
    spec.domain_shift = DomainShift{a, t};
    const auto shifted = generate_bags(spec);
    for (std::size_t i = 0; i < plain.size(); ++i) {
        const Matrix want = (plain[i].patches * a.transpose()).rowwise() + t.transpose();
        CHECK((shifted[i].patches - want).norm() < 1e-12);
    }
}

TEST_CASE("NDJSON round trip is exact") {
    BagSpec spec;
    spec.n_bags = 7;
    spec.patches_per_bag = 5;
    const auto bags = generate_bags(spec);
    const auto path = std::filesystem::temp_directory_path() / "mcmil_test_bags.ndjson";
    write_bags_ndjson(bags, path.string());
    const auto back = read_bags_ndjson(path.string());
    std::filesystem::remove(path);
    REQUIRE(back.size() == bags.size());
    for (std::size_t i = 0; i < bags.size(); ++i) {
        CHECK(back[i].patches == bags[i].patches);
        CHECK(back[i].label == bags[i].label);
        CHECK(back[i].true_label == bags[i].true_label);
        CHECK(back[i].noise_mask == bags[i].noise_mask);
    }
    CHECK_THROWS_AS(read_bags_ndjson("/nonexistent/bags.ndjson"), Error);
}

TEST_CASE("spec validation") {
    BagSpec s;
    s.noise_tile_rate = 1.5;
    CHECK_THROWS_AS(s.validate(), Error);
    BagSpec k;
    k.n_classes = 1;
    CHECK_THROWS_AS(k.validate(), Error);
    BagSpec p;
    p.patches_per_bag = 0;
    CHECK_THROWS_AS(p.validate(), Error);
}
