#include "mcmil/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mcmil {

void BagSpec::validate() const {
    require(n_classes >= 2, ErrorCode::spec, "BagSpec: n_classes must be >= 2");
    require(n_bags >= 0, ErrorCode::spec, "BagSpec: n_bags must be >= 0");
    require(patches_per_bag >= 1, ErrorCode::spec, "BagSpec: patches_per_bag must be >= 1");
    require(feature_dim >= 1, ErrorCode::spec, "BagSpec: feature_dim must be >= 1");
    require(feature_dim >= n_classes - 1, ErrorCode::spec,
            "BagSpec: feature_dim must be >= n_classes - 1 to hold the class simplex");
    require(class_separation >= 0.0, ErrorCode::spec, "BagSpec: class_separation must be >= 0");
    for (double rate : {pattern_mix_rate, noise_tile_rate, label_noise_rate}) {
        require(rate >= 0.0 && rate <= 1.0, ErrorCode::spec, "BagSpec: rates must lie in [0, 1]");
    }
    if (domain_shift) {
        require(domain_shift->a.rows() == feature_dim && domain_shift->a.cols() == feature_dim &&
                    domain_shift->t.size() == feature_dim,
                ErrorCode::spec, "BagSpec: domain shift dimensions differ from feature_dim");
    }
}

Matrix class_prototypes(const BagSpec& spec) {
    spec.validate();
    const int k = spec.n_classes;
    // Centered basis vectors span a (k-1)-dim subspace; express them in an
    // orthonormal basis of it so the simplex fits in k-1 coordinates.
    Matrix centered = Matrix::Identity(k, k) - Matrix::Constant(k, k, 1.0 / k);
    Eigen::HouseholderQR<Matrix> qr(centered);
    Matrix q = qr.householderQ() * Matrix::Identity(k, k - 1);
    Matrix coords = centered * q;  // k x (k-1), rows pairwise sqrt(2) apart
    Matrix protos = Matrix::Zero(k, spec.feature_dim);
    protos.leftCols(k - 1) = coords * (spec.class_separation / std::sqrt(2.0));
    return protos;
}

std::vector<PatchBag> generate_bags(const BagSpec& spec, int threads) {
    spec.validate();
    const Matrix protos = class_prototypes(spec);
    const int k = spec.n_classes;
    const auto n = static_cast<std::size_t>(spec.n_bags);

    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % static_cast<std::size_t>(k));
    }
    Rng label_rng(spec.seed, 0);
    std::shuffle(labels.begin(), labels.end(), label_rng.engine());

    std::vector<PatchBag> bags(n);
    parallel_for(n, threads, [&](std::size_t i) {
        Rng rng(spec.seed, i + 1);
        PatchBag bag;
        bag.true_label = labels[i];
        bag.patches.resize(spec.patches_per_bag, spec.feature_dim);
        bag.noise_mask.assign(static_cast<std::size_t>(spec.patches_per_bag), false);
        for (int p = 0; p < spec.patches_per_bag; ++p) {
            const bool artifact = rng.uniform() < spec.noise_tile_rate;
            const bool mixed = rng.uniform() < spec.pattern_mix_rate;
            int source = bag.true_label;
            if (mixed) {
                source = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(k - 1)));
                if (source >= bag.true_label) {
                    ++source;
                }
            }
            const double sd = artifact ? std::sqrt(kNoiseTileVariance) : 1.0;
            for (int d = 0; d < spec.feature_dim; ++d) {
                const double centre = artifact ? 0.0 : protos(source, d);
                bag.patches(p, d) = centre + sd * rng.normal();
            }
            bag.noise_mask[static_cast<std::size_t>(p)] = artifact;
        }
        bag.label = bag.true_label;
        if (rng.uniform() < spec.label_noise_rate) {
            int other = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(k - 1)));
            if (other >= bag.true_label) {
                ++other;
            }
            bag.label = other;
        }
        if (spec.domain_shift) {
            const Matrix shifted =
                (bag.patches * spec.domain_shift->a.transpose()).rowwise() +
                spec.domain_shift->t.transpose();
            bag.patches = shifted;
        }
        bags[i] = std::move(bag);
    });
    return bags;
}

int nearest_prototype(const PatchBag& bag, const Matrix& prototypes) {
    require(bag.patches.rows() > 0, ErrorCode::empty_bag, "nearest_prototype: empty bag");
    require(bag.patches.cols() == prototypes.cols(), ErrorCode::dimension,
            "nearest_prototype: feature dimension mismatch");
    const Vector mean = bag.patches.colwise().mean().transpose();
    int best = 0;
    double best_dist = (prototypes.row(0).transpose() - mean).squaredNorm();
    for (Eigen::Index c = 1; c < prototypes.rows(); ++c) {
        const double dist = (prototypes.row(c).transpose() - mean).squaredNorm();
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<int>(c);
        }
    }
    return best;
}

void write_bags_ndjson(const std::vector<PatchBag>& bags, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open " + path + " for writing");
    for (const auto& bag : bags) {
        nlohmann::json rec;
        rec["label"] = bag.label;
        rec["true_label"] = bag.true_label;
        rec["noise_mask"] = bag.noise_mask;
        auto rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < bag.patches.rows(); ++r) {
            std::vector<double> row(bag.patches.row(r).begin(), bag.patches.row(r).end());
            rows.push_back(std::move(row));
        }
        rec["patches"] = std::move(rows);
        out << rec.dump() << '\n';
    }
    require(static_cast<bool>(out), ErrorCode::io, "write failed: " + path);
}

std::vector<PatchBag> read_bags_ndjson(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path);
    std::vector<PatchBag> bags;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto rec = nlohmann::json::parse(line);
            PatchBag bag;
            bag.label = rec.at("label").get<int>();
            bag.true_label = rec.at("true_label").get<int>();
            bag.noise_mask = rec.at("noise_mask").get<std::vector<bool>>();
            const auto rows = rec.at("patches").get<std::vector<std::vector<double>>>();
            require(!rows.empty(), ErrorCode::empty_bag, "bag with no patches");
            const auto dim = static_cast<Eigen::Index>(rows.front().size());
            bag.patches.resize(static_cast<Eigen::Index>(rows.size()), dim);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                require(static_cast<Eigen::Index>(rows[r].size()) == dim, ErrorCode::dimension,
                        "ragged patch rows");
                for (Eigen::Index d = 0; d < dim; ++d) {
                    bag.patches(static_cast<Eigen::Index>(r), d) = rows[r][static_cast<std::size_t>(d)];
                }
            }
            require(bag.noise_mask.size() == rows.size(), ErrorCode::dimension,
                    "noise_mask length differs from patch count");
            bags.push_back(std::move(bag));
        } catch (const nlohmann::json::exception& e) {
            std::ostringstream os;
            os << path << ":" << line_no << ": " << e.what();
            fail(ErrorCode::io, os.str());
        } catch (const Error& e) {
            std::ostringstream os;
            os << path << ":" << line_no << ": " << e.what();
            fail(e.code(), os.str());
        }
    }
    return bags;
}

}  // namespace mcmil
