// Separation and reconstruction quality metrics: pairwise channel
// cosine similarity (crossover), mean L1 / PSNR / SSIM, and corpus
// aggregation.
#pragma once

#include <string>
#include <vector>

#include "stainsep/image.hpp"

namespace stainsep {

class MetricsError : public std::runtime_error {
public:
    explicit MetricsError(const std::string& msg) : std::runtime_error(msg) {}
};

// K x K symmetric cosine-similarity matrix of the flattened channels.
// A zero channel scores 0 against everything, including itself.
std::vector<double> channel_crossover(const Image& concentrations);

struct ReconMetrics {
    double mean_l1 = 0.0;
    double psnr = 0.0;   // dB, peak 1.0, capped at 100
    double ssim = 0.0;   // 11x11 gaussian window sigma 1.5, per channel averaged
};

ReconMetrics reconstruction_metrics(const Image& reconstructed, const Image& original);

struct CrossoverStats {
    int K = 0;
    std::vector<double> mean;     // K x K
    std::vector<double> stddev;   // K x K, population convention
};

CrossoverStats mean_crossover_over_corpus(const std::vector<std::vector<double>>& matrices);

std::string crossover_csv(const std::vector<std::string>& names, const std::vector<double>& matrix);

}  // namespace stainsep
