// Unsupervised training loop: patch ingestion with Otsu tissue masking,
// hue-threshold masks for sparse stains, Adam updates of the encoder and
// the stain parameters, checkpointing, and tiled inference.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "stainsep/encoder.hpp"
#include "stainsep/formats.hpp"
#include "stainsep/losses.hpp"
#include "stainsep/stain.hpp"

namespace stainsep {

class TrainerError : public std::runtime_error {
public:
    explicit TrainerError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct HueMaskSpec {
    std::string stain;               // resolved to a channel by name
    double hue_center_deg = -1.0;    // < 0: derived from the initial stain color
    double hue_tolerance_deg = 25.0;
    double min_saturation = 0.1;
    double min_od = 0.25;            // threshold on ||od(x)||_2

    void validate() const {
        if (!(hue_tolerance_deg > 0.0 && hue_tolerance_deg <= 180.0))
            throw ConfigError("HueMaskSpec: tolerance must be in (0,180]");
    }
};

struct TrainConfig {
    int steps = 2000;
    int batch_size = 2;
    int crop = 128;
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;
    int base_channels = 32;
    int residual_blocks = 2;
    LossWeights weights;
    double tau = 1e-2;
    double topk_p = 0.05;
    double od_eps = kDefaultOdEps;
    double ent_eps = 1e-8;
    std::vector<HueMaskSpec> hue_masks;
    StainMatrix init_stains;         // S-tilde source colors
    int checkpoint_every = 500;
    int threads = 1;
    std::string extractor_bank;      // optional SQFB file of fixed filters

    void validate() const;
};

// JSON config file; unknown keys rejected
TrainConfig load_train_config(const std::string& path);

// ---------------------------------------------------------------------------
// patch ingestion

struct PatchIndexEntry {
    std::string path;
    double tissue_fraction = 0.0;
};

struct PatchIndex {
    std::vector<PatchIndexEntry> entries;
};

// Otsu threshold (0..1) on the luminosity histogram; degenerate
// single-mode histograms fall back to a fixed white cutoff.
double otsu_luminosity_threshold(const Image& rgb);
double tissue_fraction(const Image& rgb);

PatchIndex ingest_patches(const std::string& image_dir, double min_tissue = 0.5);
void save_patch_index(const std::string& path, const PatchIndex& index);
PatchIndex load_patch_index(const std::string& path);

// ---------------------------------------------------------------------------
// hue masks and stain initialization

// hue (degrees) and saturation of the color a unit concentration of this
// stain transmits
double stain_hue_deg(const std::array<double, 3>& od_column);
void rgb_to_hsv(double r, double g, double b, double& h_deg, double& s, double& v);

// H x W x 1 binary mask
Image make_hue_mask(const Image& rgb, const HueMaskSpec& spec,
                    const std::array<double, 3>& stain_column, double od_eps = kDefaultOdEps);

// inverse-softplus parameters u with softplus(u) ~= normalized S-tilde
Tensor<float> init_stain_params(const StainMatrix& s_tilde);
double inverse_softplus(double y);

// ---------------------------------------------------------------------------

struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<float>> m, v;

    void step(std::vector<Tensor<float>>& params);
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossReport> reports;
};

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);

    // patches: decoded training images; csv receives one LossReport row
    // per step. checkpoint_sink, when set, is called at the checkpoint
    // cadence and at the end.
    TrainResult run(const std::vector<Image>& patches, std::ostream* csv = nullptr,
                    const std::function<void(const Checkpoint&)>& checkpoint_sink = {});

    Checkpoint make_checkpoint() const;
    const TrainConfig& config() const { return cfg_; }
    StainMatrix learned_stains() const;   // normalized columns

private:
    TrainConfig cfg_;
    EncoderNet<float> net_;
    Tensor<float> stain_u_;      // [3,K] learnable
    Tensor<float> s_tilde_;      // [3,K] constant anchor
    FeatureExtractor<float> extractor_;
    Adam adam_;
    std::vector<int> hue_channels_;   // resolved c_star per hue spec
    std::uint64_t step_ = 0;
};

// rebuild model state from a checkpoint
class Separator {
public:
    explicit Separator(const Checkpoint& cp);

    // tiles inputs larger than tile x tile with overlapping feathered crops
    ConcentrationMap separate(const Image& rgb, int tile = 128) const;
    StainMatrix stains() const;
    const std::vector<std::string>& names() const { return names_; }

private:
    EncoderNet<float> net_;
    Tensor<float> stain_u_;
    std::vector<std::string> names_;
};

}  // namespace stainsep
