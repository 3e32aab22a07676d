// Synthetic scene generator with exact Beer-Lambert ground truth, and
// the permutation/scale-invariant recovery score used to grade
// estimated decompositions against it.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stainsep/stain.hpp"

namespace stainsep {

struct BlobStats {
    int count_min = 3, count_max = 8;
    double radius_min = 3.0, radius_max = 10.0;   // gaussian sigma in px
    double peak_min = 0.4, peak_max = 1.2;        // peak concentration
};

struct CoStainPair {
    int a = 0, b = 1;          // blob in channel a duplicated into b
    double prob = 0.0;
    double scale_min = 0.3, scale_max = 1.0;
};

struct SceneSpec {
    int height = 128, width = 128;
    StainMatrix true_stains;            // S*
    std::vector<BlobStats> blobs;       // one per stain
    std::vector<CoStainPair> co_stains;
    double background = 0.0;            // concentration floor on all channels
    double noise_sigma = 0.01;          // RGB-domain gaussian noise
    std::uint64_t seed = 0;

    void validate() const;
};

struct Scene {
    Image rgb;                // H x W x 3 in [0,1]
    ConcentrationMap truth;   // C*
    StainMatrix stains;       // S*
};

Scene generate_scene(const SceneSpec& spec);
Scene generate_scene(const SceneSpec& spec, std::uint64_t seed_override);

SceneSpec load_scene_spec(const std::string& path);
SceneSpec default_scene_spec();   // colorectal panel with mild co-staining

struct RecoveryReport {
    // matching[i] = estimate channel assigned to truth channel i
    std::vector<int> matching;
    std::vector<double> scale;               // best per-channel scale factor
    std::vector<double> correlation;         // after matching, scale-invariant
    std::vector<double> angular_error_deg;   // empty when no stain matrices given
    double mean_correlation = 0.0;
    double mean_angular_error_deg = 0.0;
};

RecoveryReport recovery_score(const Image& c_est, const Image& c_true,
                              const StainMatrix* s_est = nullptr,
                              const StainMatrix* s_true = nullptr);

double column_angle_deg(const std::array<double, 3>& a, const std::array<double, 3>& b);

}  // namespace stainsep
