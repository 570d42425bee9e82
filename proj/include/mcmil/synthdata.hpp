#ifndef MCMIL_SYNTHDATA_HPP
#define MCMIL_SYNTHDATA_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcmil/numerics.hpp"

namespace mcmil {

struct DomainShift {
    Matrix a;  // feature_dim x feature_dim
    Vector t;  // feature_dim
};

/// Knobs for synthetic slides. Classes sit on scaled simplex vertices;
/// corruption sources are mixed-pattern patches, class-independent artifact
/// tiles, label flips and a global affine shift.
struct BagSpec {
    int n_classes = 5;
    int n_bags = 350;
    int patches_per_bag = 64;
    int feature_dim = 16;
    double class_separation = 3.0;
    double pattern_mix_rate = 0.2;
    double noise_tile_rate = 0.2;
    double label_noise_rate = 0.05;
    std::optional<DomainShift> domain_shift;
    std::uint64_t seed = 1;

    void validate() const;
};

struct PatchBag {
    Matrix patches;  // patches_per_bag x feature_dim, one patch per row
    int label = 0;
    int true_label = 0;
    std::vector<bool> noise_mask;
};

/// Artifact tiles are N(0, kNoiseTileVariance * I); class patches have unit
/// variance around their prototype.
inline constexpr double kNoiseTileVariance = 4.0;

/// Rows are the class prototypes: centered simplex vertices with pairwise
/// distance `class_separation`.
Matrix class_prototypes(const BagSpec& spec);

std::vector<PatchBag> generate_bags(const BagSpec& spec, int threads = 1);

/// Nearest-prototype prediction on the mean patch. Oracle baseline, also
/// used to confirm separability of a generated set.
int nearest_prototype(const PatchBag& bag, const Matrix& prototypes);

// NDJSON: one {label, true_label, noise_mask, patches} record per bag.
void write_bags_ndjson(const std::vector<PatchBag>& bags, const std::string& path);
std::vector<PatchBag> read_bags_ndjson(const std::string& path);

}  // namespace mcmil

#endif
