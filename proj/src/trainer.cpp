#include "stainsep/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>

#include "stainsep/png_io.hpp"
#include "stainsep/rng.hpp"

namespace stainsep {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (crop < 8 || crop % 4) throw ConfigError("crop must be >= 8 and divisible by 4");
    if (lr <= 0.0) throw ConfigError("lr must be > 0");
    if (init_stains.K() < 2) throw ConfigError("at least 2 stains required");
    if (init_stains.names.size() != init_stains.columns.size())
        throw ConfigError("stain names and columns must align");
    if (tau <= 0.0) throw ConfigError("tau must be > 0");
    if (!(topk_p > 0.0 && topk_p < 1.0)) throw ConfigError("topk_p must be in (0,1)");
    if (od_eps <= 0.0 || ent_eps <= 0.0) throw ConfigError("eps values must be > 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    weights.validate();
    std::set<std::string> known(init_stains.names.begin(), init_stains.names.end());
    for (const auto& spec : hue_masks) {
        spec.validate();
        if (!known.count(spec.stain))
            throw ConfigError("hue mask references unknown stain '" + spec.stain + "'");
    }
    EncoderConfig ec{base_channels, init_stains.K(), residual_blocks, 3};
    ec.validate();
}

namespace {

void reject_unknown_keys(const json& obj, const std::set<std::string>& known,
                         const std::string& context) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError(context + ": unknown key '" + it.key() + "'");
}

StainMatrix parse_stains(const json& doc) {
    StainMatrix s;
    reject_unknown_keys(doc, {"names", "columns", "swatches"}, "stains");
    s.names = doc.at("names").get<std::vector<std::string>>();
    if (doc.contains("columns") == doc.contains("swatches"))
        throw ConfigError("stains: give exactly one of 'columns' (OD) or 'swatches' (RGB)");
    if (doc.contains("columns")) {
        for (const auto& col : doc["columns"])
            s.columns.push_back({col.at(0).get<double>(), col.at(1).get<double>(), col.at(2).get<double>()});
    } else {
        for (const auto& sw : doc["swatches"]) {
            std::array<double, 3> od;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = sw.at(ch).get<double>();
                if (v <= 0.0 || v > 1.0)
                    throw ConfigError("stains: swatch values must be in (0,1]");
                od[ch] = -std::log(v);
            }
            s.columns.push_back(od);
        }
    }
    if (s.names.size() != s.columns.size())
        throw ConfigError("stains: names and colors must align");
    return s;
}

}  // namespace

TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("'" + path + "': " + e.what());
    }
    TrainConfig cfg;
    try {
        reject_unknown_keys(doc,
                            {"steps", "batch_size", "crop", "lr", "beta1", "beta2", "adam_eps",
                             "seed", "base_channels", "residual_blocks", "weights", "tau",
                             "topk_p", "od_eps", "ent_eps", "hue_masks", "stains", "stains_file",
                             "checkpoint_every", "threads", "extractor_bank"},
                            "config");
        cfg.steps = doc.value("steps", cfg.steps);
        cfg.batch_size = doc.value("batch_size", cfg.batch_size);
        cfg.crop = doc.value("crop", cfg.crop);
        cfg.lr = doc.value("lr", cfg.lr);
        cfg.beta1 = doc.value("beta1", cfg.beta1);
        cfg.beta2 = doc.value("beta2", cfg.beta2);
        cfg.adam_eps = doc.value("adam_eps", cfg.adam_eps);
        cfg.seed = doc.value("seed", cfg.seed);
        cfg.base_channels = doc.value("base_channels", cfg.base_channels);
        cfg.residual_blocks = doc.value("residual_blocks", cfg.residual_blocks);
        if (doc.contains("weights")) {
            const auto& w = doc["weights"];
            reject_unknown_keys(w, {"lambda_ent", "lambda_col", "lambda_ov", "lambda_mask",
                                    "perceptual_weight"},
                                "weights");
            cfg.weights.lambda_ent = w.value("lambda_ent", cfg.weights.lambda_ent);
            cfg.weights.lambda_col = w.value("lambda_col", cfg.weights.lambda_col);
            cfg.weights.lambda_ov = w.value("lambda_ov", cfg.weights.lambda_ov);
            cfg.weights.lambda_mask = w.value("lambda_mask", cfg.weights.lambda_mask);
            cfg.weights.perceptual_weight = w.value("perceptual_weight", cfg.weights.perceptual_weight);
        }
        cfg.tau = doc.value("tau", cfg.tau);
        cfg.topk_p = doc.value("topk_p", cfg.topk_p);
        cfg.od_eps = doc.value("od_eps", cfg.od_eps);
        cfg.ent_eps = doc.value("ent_eps", cfg.ent_eps);
        if (doc.contains("hue_masks"))
            for (const auto& hm : doc["hue_masks"]) {
                reject_unknown_keys(hm, {"stain", "hue_center_deg", "hue_tolerance_deg",
                                         "min_saturation", "min_od"},
                                    "hue_masks");
                HueMaskSpec spec;
                spec.stain = hm.at("stain").get<std::string>();
                spec.hue_center_deg = hm.value("hue_center_deg", spec.hue_center_deg);
                spec.hue_tolerance_deg = hm.value("hue_tolerance_deg", spec.hue_tolerance_deg);
                spec.min_saturation = hm.value("min_saturation", spec.min_saturation);
                spec.min_od = hm.value("min_od", spec.min_od);
                cfg.hue_masks.push_back(spec);
            }
        if (doc.contains("stains") == doc.contains("stains_file"))
            throw ConfigError("config: give exactly one of 'stains' or 'stains_file'");
        if (doc.contains("stains")) cfg.init_stains = parse_stains(doc["stains"]);
        else cfg.init_stains = load_stain_matrix(doc["stains_file"].get<std::string>());
        cfg.checkpoint_every = doc.value("checkpoint_every", cfg.checkpoint_every);
        cfg.threads = doc.value("threads", cfg.threads);
        cfg.extractor_bank = doc.value("extractor_bank", cfg.extractor_bank);
    } catch (const json::exception& e) {
        throw ConfigError("'" + path + "': " + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// ingestion

double otsu_luminosity_threshold(const Image& rgb) {
    constexpr int bins = 256;
    std::vector<std::int64_t> hist(bins, 0);
    const size_t npix = static_cast<size_t>(rgb.height) * rgb.width;
    for (size_t p = 0; p < npix; ++p) {
        const float lum = (rgb.values[p * 3] + rgb.values[p * 3 + 1] + rgb.values[p * 3 + 2]) / 3.0f;
        int b = static_cast<int>(lum * (bins - 1) + 0.5f);
        b = std::clamp(b, 0, bins - 1);
        ++hist[b];
    }
    double total_mean = 0.0;
    for (int b = 0; b < bins; ++b) total_mean += b * static_cast<double>(hist[b]);
    total_mean /= static_cast<double>(npix);

    double best_sigma = 0.0;
    int best_bin = -1;
    double w0 = 0.0, sum0 = 0.0;
    for (int b = 0; b < bins - 1; ++b) {
        w0 += static_cast<double>(hist[b]) / npix;
        sum0 += b * static_cast<double>(hist[b]) / npix;
        if (w0 <= 0.0 || w0 >= 1.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (total_mean - sum0) / (1.0 - w0);
        const double sigma = w0 * (1.0 - w0) * (mu0 - mu1) * (mu0 - mu1);
        if (sigma > best_sigma) { best_sigma = sigma; best_bin = b; }
    }
    // unimodal histogram: fall back to a plain white cutoff
    if (best_bin < 0) return 0.9;
    return (best_bin + 0.5) / (bins - 1);
}

double tissue_fraction(const Image& rgb) {
    const double thr = otsu_luminosity_threshold(rgb);
    const size_t npix = static_cast<size_t>(rgb.height) * rgb.width;
    size_t tissue = 0;
    for (size_t p = 0; p < npix; ++p) {
        const double lum = (rgb.values[p * 3] + rgb.values[p * 3 + 1] + rgb.values[p * 3 + 2]) / 3.0;
        if (lum < thr) ++tissue;
    }
    return static_cast<double>(tissue) / npix;
}

PatchIndex ingest_patches(const std::string& image_dir, double min_tissue) {
    PatchIndex index;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(image_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        Image img;
        try {
            img = read_png(file.string());
        } catch (const ImageError& e) {
            std::cerr << "warning: skipping " << file << ": " << e.what() << "\n";
            continue;
        }
        const double frac = tissue_fraction(img);
        if (frac >= min_tissue) index.entries.push_back({file.string(), frac});
    }
    if (index.entries.empty())
        throw TrainerError("ingest_patches: no patch in '" + image_dir +
                           "' meets the tissue fraction threshold");
    return index;
}

void save_patch_index(const std::string& path, const PatchIndex& index) {
    json doc;
    doc["version"] = 1;
    json entries = json::array();
    for (const auto& e : index.entries)
        entries.push_back({{"path", e.path}, {"tissue_fraction", e.tissue_fraction}});
    doc["entries"] = entries;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw TrainerError("cannot write index '" + path + "'");
    os << doc.dump(2) << "\n";
}

PatchIndex load_patch_index(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TrainerError("cannot open index '" + path + "'");
    json doc;
    try {
        is >> doc;
        PatchIndex index;
        for (const auto& e : doc.at("entries"))
            index.entries.push_back({e.at("path").get<std::string>(),
                                     e.at("tissue_fraction").get<double>()});
        return index;
    } catch (const json::exception& e) {
        throw TrainerError("'" + path + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// hue masks

void rgb_to_hsv(double r, double g, double b, double& h_deg, double& s, double& v) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d == 0.0) { h_deg = 0.0; return; }
    if (mx == r) h_deg = 60.0 * std::fmod((g - b) / d, 6.0);
    else if (mx == g) h_deg = 60.0 * ((b - r) / d + 2.0);
    else h_deg = 60.0 * ((r - g) / d + 4.0);
    if (h_deg < 0.0) h_deg += 360.0;
}

double stain_hue_deg(const std::array<double, 3>& od_column) {
    double h, s, v;
    rgb_to_hsv(std::exp(-od_column[0]), std::exp(-od_column[1]), std::exp(-od_column[2]), h, s, v);
    return h;
}

Image make_hue_mask(const Image& rgb, const HueMaskSpec& spec,
                    const std::array<double, 3>& stain_column, double od_eps) {
    spec.validate();
    const double center = spec.hue_center_deg >= 0.0 ? spec.hue_center_deg : stain_hue_deg(stain_column);
    Image mask(rgb.height, rgb.width, 1);
    const size_t npix = static_cast<size_t>(rgb.height) * rgb.width;
    for (size_t p = 0; p < npix; ++p) {
        const double r = rgb.values[p * 3], g = rgb.values[p * 3 + 1], b = rgb.values[p * 3 + 2];
        double h, s, v;
        rgb_to_hsv(r, g, b, h, s, v);
        if (s < spec.min_saturation) continue;
        double dh = std::abs(h - center);
        if (dh > 180.0) dh = 360.0 - dh;
        if (dh > spec.hue_tolerance_deg) continue;
        double od2 = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
            const double od = -std::log(rgb.values[p * 3 + ch] + od_eps);
            od2 += od > 0.0 ? od * od : 0.0;
        }
        if (std::sqrt(od2) < spec.min_od) continue;
        mask.values[p] = 1.0f;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// stain parameterization

double inverse_softplus(double y) {
    // log(e^y - 1), stable for large y
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

Tensor<float> init_stain_params(const StainMatrix& s_tilde) {
    const int k = s_tilde.K();
    std::vector<float> u(3 * static_cast<size_t>(k));
    for (int row = 0; row < 3; ++row)
        for (int col = 0; col < k; ++col) {
            double y = s_tilde.columns[col][row];
            if (y < 1e-4) y = 1e-4;   // floor nonpositive targets before inversion
            u[row * k + col] = static_cast<float>(inverse_softplus(y));
        }
    Tensor<float> t = Tensor<float>::from_data({3, k}, std::move(u));
    t.set_requires_grad(true);
    return t;
}

// ---------------------------------------------------------------------------
// optimizer

void Adam::step(std::vector<Tensor<float>>& params) {
    if (m.empty()) {
        m.resize(params.size());
        v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].data().size(), 0.0f);
            v[i].assign(params[i].data().size(), 0.0f);
        }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& data = params[i].data();
        auto& grad = params[i].grad();
        for (size_t j = 0; j < data.size(); ++j) {
            const float g = grad[j];
            m[i][j] = static_cast<float>(beta1 * m[i][j] + (1.0 - beta1) * g);
            v[i][j] = static_cast<float>(beta2 * v[i][j] + (1.0 - beta2) * g * g);
            const double mhat = m[i][j] / bc1;
            const double vhat = v[i][j] / bc2;
            data[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

// ---------------------------------------------------------------------------
// trainer

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    EncoderConfig ec{cfg.base_channels, cfg.init_stains.K(), cfg.residual_blocks, 3};
    net_ = EncoderNet<float>::build(ec, cfg.seed);
    const StainMatrix tilde = normalize_columns(cfg.init_stains);
    stain_u_ = init_stain_params(tilde);
    std::vector<float> anchor(3 * static_cast<size_t>(tilde.K()));
    for (int row = 0; row < 3; ++row)
        for (int col = 0; col < tilde.K(); ++col)
            anchor[row * tilde.K() + col] = static_cast<float>(tilde.columns[col][row]);
    s_tilde_ = Tensor<float>::from_data({3, tilde.K()}, std::move(anchor));
    if (!cfg.extractor_bank.empty()) {
        auto records = load_tensor_bank(cfg.extractor_bank);
        extractor_ = FeatureExtractor<float>{};
        for (size_t i = 0;; ++i) {
            const std::string wname = "stage" + std::to_string(i) + ".w";
            const std::string bname = "stage" + std::to_string(i) + ".b";
            auto wit = std::find_if(records.begin(), records.end(),
                                    [&](const TensorRecord& r) { return r.name == wname; });
            if (wit == records.end()) break;
            auto bit = std::find_if(records.begin(), records.end(),
                                    [&](const TensorRecord& r) { return r.name == bname; });
            if (bit == records.end())
                throw TrainerError("extractor bank: missing '" + bname + "'");
            ConvLayer<float> l;
            l.w = Tensor<float>::from_data(wit->shape, wit->values);
            l.b = Tensor<float>::from_data(bit->shape, bit->values);
            l.pad = wit->shape[3] / 2;
            l.stride = (i == 0) ? 1 : 2;
            extractor_.stages.push_back(std::move(l));
        }
        if (extractor_.stages.empty())
            throw TrainerError("extractor bank '" + cfg.extractor_bank + "' holds no stages");
    } else {
        extractor_ = FeatureExtractor<float>::seeded(cfg.seed);
    }
    for (const auto& spec : cfg.hue_masks) {
        const auto it = std::find(cfg.init_stains.names.begin(), cfg.init_stains.names.end(), spec.stain);
        hue_channels_.push_back(static_cast<int>(it - cfg.init_stains.names.begin()));
    }
    adam_ = Adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
}

Checkpoint Trainer::make_checkpoint() const {
    Checkpoint cp;
    cp.config = net_.cfg;
    cp.step = step_;
    cp.stain_names = cfg_.init_stains.names;
    auto& net = const_cast<EncoderNet<float>&>(net_);
    for (auto& [name, t] : net.named_params())
        cp.params.push_back({"enc." + name, t.shape(), t.data()});
    cp.params.push_back({"stain.u", stain_u_.shape(), stain_u_.data()});
    if (adam_.t > 0) {
        cp.has_optimizer = true;
        for (size_t i = 0; i < adam_.m.size(); ++i) {
            const Shape s = {static_cast<int>(adam_.m[i].size())};
            cp.optimizer.push_back({"adam.m." + std::to_string(i), s, adam_.m[i]});
            cp.optimizer.push_back({"adam.v." + std::to_string(i), s, adam_.v[i]});
        }
        cp.optimizer.push_back({"adam.t", {1}, {static_cast<float>(adam_.t)}});
    }
    return cp;
}

StainMatrix Trainer::learned_stains() const {
    StainMatrix s;
    s.names = cfg_.init_stains.names;
    const int k = cfg_.init_stains.K();
    for (int col = 0; col < k; ++col) {
        std::array<double, 3> c;
        for (int row = 0; row < 3; ++row) {
            const double u = stain_u_.data()[row * k + col];
            c[row] = u > 30.0 ? u : std::log1p(std::exp(u));
        }
        s.columns.push_back(c);
    }
    return normalize_columns(s);
}

TrainResult Trainer::run(const std::vector<Image>& patches, std::ostream* csv,
                         const std::function<void(const Checkpoint&)>& checkpoint_sink) {
    if (patches.empty()) throw TrainerError("train: empty patch set");
    for (const auto& p : patches)
        if (p.height < cfg_.crop || p.width < cfg_.crop || p.channels != 3)
            throw TrainerError("train: patch " + std::to_string(p.width) + "x" +
                               std::to_string(p.height) + " smaller than crop " +
                               std::to_string(cfg_.crop));

    const int k = cfg_.init_stains.K();
    const int crop = cfg_.crop, batch = cfg_.batch_size;
    Rng sampler(derive_seed(cfg_.seed, 0xBA7C4));

    std::vector<Tensor<float>> params;
    for (auto& [name, t] : net_.named_params()) params.push_back(t);
    params.push_back(stain_u_);

    TrainResult result;
    if (csv) *csv << loss_report_csv_header() << "\n";

    for (std::int64_t step = 0; step < cfg_.steps; ++step) {
        // assemble batch of random crops, CHW
        std::vector<float> batch_data(static_cast<size_t>(batch) * 3 * crop * crop);
        std::vector<Image> crops(batch);
        for (int b = 0; b < batch; ++b) {
            const int pi = sampler.uniform_int(0, static_cast<int>(patches.size()) - 1);
            const Image& patch = patches[pi];
            const int y0 = sampler.uniform_int(0, patch.height - crop);
            const int x0 = sampler.uniform_int(0, patch.width - crop);
            Image& cimg = crops[b];
            cimg = Image(crop, crop, 3);
            for (int y = 0; y < crop; ++y)
                for (int x = 0; x < crop; ++x)
                    for (int ch = 0; ch < 3; ++ch) {
                        const float v = patch.at(y0 + y, x0 + x, ch);
                        cimg.at(y, x, ch) = v;
                        batch_data[((static_cast<size_t>(b) * 3 + ch) * crop + y) * crop + x] = v;
                    }
        }
        Tensor<float> x = Tensor<float>::from_data({batch, 3, crop, crop}, std::move(batch_data));

        for (auto& p : params) p.zero_grad();

        Tensor<float> c = net_.forward(x);
        Tensor<float> s_sp = softplus(stain_u_);
        Tensor<float> s_norm = normalize_stain_columns(s_sp);
        Tensor<float> xhat = bl_decode_diff(s_norm, c);

        RecLoss<float> rec = loss_reconstruction(xhat, x, extractor_, cfg_.weights.perceptual_weight);
        EntropyLoss<float> ent = loss_entropy(c, cfg_.tau, cfg_.ent_eps);
        Tensor<float> col = loss_color(s_sp, s_tilde_);
        OverlapLoss<float> ov = loss_topk_overlap(c, cfg_.topk_p);

        MaskLoss<float> mask_term;
        mask_term.value = Tensor<float>::scalar(0.0f);
        if (!cfg_.hue_masks.empty()) {
            Tensor<float> acc;
            for (size_t si = 0; si < cfg_.hue_masks.size(); ++si) {
                const int c_star = hue_channels_[si];
                Tensor<float> mask = Tensor<float>::zeros({batch, 1, crop, crop});
                for (int b = 0; b < batch; ++b) {
                    Image m = make_hue_mask(crops[b], cfg_.hue_masks[si],
                                            cfg_.init_stains.columns[c_star], cfg_.od_eps);
                    std::copy(m.values.begin(), m.values.end(),
                              mask.data().begin() + static_cast<size_t>(b) * crop * crop);
                }
                MaskLoss<float> one = loss_mask_dominance(c, mask, c_star, cfg_.ent_eps);
                mask_term.masked_count += one.masked_count;
                acc = acc.defined() ? add(acc, one.value) : one.value;
            }
            mask_term.value = scale(acc, 1.0f / static_cast<float>(cfg_.hue_masks.size()));
        }

        // the sparsity pressures only help once channel routing has formed;
        // applied from the start they collapse the decomposition onto a
        // single channel, so they ramp in over the middle of the run
        LossWeights w = cfg_.weights;
        const double ramp = std::clamp(
            (static_cast<double>(step) / static_cast<double>(cfg_.steps) - 0.3) / 0.3, 0.0, 1.0);
        w.lambda_ent *= ramp;
        w.lambda_ov *= ramp;
        // the color prior hands over to the sparsity terms: a strong early
        // anchor keeps each channel on its own stain while routing forms,
        // then relaxes so reconstruction can fine-tune the column directions
        w.lambda_col *= 1.0 - 0.7 * ramp;

        LossBundle<float> bundle = loss_total(rec, ent, col, ov, mask_term, w);
        if (!std::isfinite(bundle.report.total)) {
            std::vector<TensorRecord> dump;
            dump.push_back({"batch", x.shape(), x.data()});
            dump.push_back({"concentrations", c.shape(), c.data()});
            save_tensor_bank("failed_batch.sqfb", dump);
            throw TrainerError("train: non-finite loss at step " + std::to_string(step) +
                               " (rec_l1=" + std::to_string(bundle.report.rec_l1) +
                               ", ent=" + std::to_string(bundle.report.ent) +
                               "); offending batch dumped to failed_batch.sqfb");
        }

        bundle.total.backward();
        // the L1 terms give constant-magnitude sign gradients, so without a
        // decaying step size the parameters orbit the optimum instead of
        // settling into it
        const double frac = static_cast<double>(step) / static_cast<double>(cfg_.steps);
        adam_.lr = cfg_.lr * (frac < 0.5 ? 1.0 : 1.0 - 0.9 * (frac - 0.5) / 0.5);
        adam_.step(params);
        step_ = static_cast<std::uint64_t>(step + 1);

        result.reports.push_back(bundle.report);
        if (csv) *csv << loss_report_csv_row(step + 1, bundle.report) << "\n";
        if (checkpoint_sink && (step + 1) % cfg_.checkpoint_every == 0 && step + 1 < cfg_.steps)
            checkpoint_sink(make_checkpoint());
    }

    result.checkpoint = make_checkpoint();
    if (checkpoint_sink) checkpoint_sink(result.checkpoint);
    return result;
}

// ---------------------------------------------------------------------------
// separation

Separator::Separator(const Checkpoint& cp) {
    cp.config.validate();
    net_ = EncoderNet<float>::build(cp.config, 0);
    names_ = cp.stain_names;
    if (static_cast<int>(names_.size()) != cp.config.stains)
        throw TrainerError("checkpoint: stain name count does not match K");
    auto named = net_.named_params();
    for (auto& [name, t] : named) {
        const std::string want = "enc." + name;
        auto it = std::find_if(cp.params.begin(), cp.params.end(),
                               [&](const TensorRecord& r) { return r.name == want; });
        if (it == cp.params.end()) throw TrainerError("checkpoint: missing tensor '" + want + "'");
        if (it->shape != t.shape())
            throw TrainerError("checkpoint: tensor '" + want + "' has shape " + shape_str(it->shape) +
                               ", expected " + shape_str(t.shape()));
        t.data() = it->values;
        t.set_requires_grad(false);
    }
    auto it = std::find_if(cp.params.begin(), cp.params.end(),
                           [](const TensorRecord& r) { return r.name == "stain.u"; });
    if (it == cp.params.end()) throw TrainerError("checkpoint: missing tensor 'stain.u'");
    stain_u_ = Tensor<float>::from_data(it->shape, it->values);
}

StainMatrix Separator::stains() const {
    StainMatrix s;
    s.names = names_;
    const int k = stain_u_.shape()[1];
    for (int col = 0; col < k; ++col) {
        std::array<double, 3> c;
        for (int row = 0; row < 3; ++row) {
            const double u = stain_u_.data()[row * k + col];
            c[row] = u > 30.0 ? u : std::log1p(std::exp(u));
        }
        s.columns.push_back(c);
    }
    return normalize_columns(s);
}

namespace {

Tensor<float> image_to_chw(const Image& img) {
    std::vector<float> data(img.values.size());
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < img.channels; ++ch)
                data[ch * plane + static_cast<size_t>(y) * img.width + x] = img.at(y, x, ch);
    return Tensor<float>::from_data({1, img.channels, img.height, img.width}, std::move(data));
}

Image chw_to_image(const Tensor<float>& t) {
    const int c = t.shape()[1], h = t.shape()[2], w = t.shape()[3];
    Image img(h, w, c);
    const size_t plane = static_cast<size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(y, x, ch) = t.data()[ch * plane + static_cast<size_t>(y) * w + x];
    return img;
}

Image pad_edge(const Image& img, int target_h, int target_w) {
    Image out(target_h, target_w, img.channels);
    for (int y = 0; y < target_h; ++y)
        for (int x = 0; x < target_w; ++x) {
            const int sy = std::min(y, img.height - 1);
            const int sx = std::min(x, img.width - 1);
            for (int ch = 0; ch < img.channels; ++ch)
                out.at(y, x, ch) = img.at(sy, sx, ch);
        }
    return out;
}

// ramp from 1/(margin+1) at the tile edge to 1 in the interior
double feather_weight(int pos, int extent, int margin) {
    const int edge = std::min(pos + 1, extent - pos);
    return edge >= margin + 1 ? 1.0 : static_cast<double>(edge) / (margin + 1);
}

}  // namespace

ConcentrationMap Separator::separate(const Image& rgb, int tile) const {
    if (rgb.channels != 3) throw TrainerError("separate: input must be RGB");
    if (tile < 16 || tile % 4) throw TrainerError("separate: tile must be >= 16 and divisible by 4");
    const int k = net_.cfg.stains;
    ConcentrationMap out;
    out.names = names_;

    if (rgb.height <= tile && rgb.width <= tile && rgb.height % 4 == 0 && rgb.width % 4 == 0) {
        Tensor<float> c = net_.forward(image_to_chw(rgb));
        out.map = chw_to_image(c);
        return out;
    }

    const int pad_h = std::max(tile, (rgb.height + 3) / 4 * 4);
    const int pad_w = std::max(tile, (rgb.width + 3) / 4 * 4);
    Image padded = (pad_h == rgb.height && pad_w == rgb.width) ? rgb : pad_edge(rgb, pad_h, pad_w);

    const int overlap = std::min(16, tile / 2);   // keep the stride positive for small tiles
    const int stride = tile - overlap;
    std::vector<int> ys, xs;
    for (int y = 0;; y += stride) {
        if (y + tile >= pad_h) { ys.push_back(pad_h - tile); break; }
        ys.push_back(y);
    }
    for (int x = 0;; x += stride) {
        if (x + tile >= pad_w) { xs.push_back(pad_w - tile); break; }
        xs.push_back(x);
    }

    Image acc(pad_h, pad_w, k);
    std::vector<double> weight(static_cast<size_t>(pad_h) * pad_w, 0.0);
    for (int y0 : ys)
        for (int x0 : xs) {
            Image crop(tile, tile, 3);
            for (int y = 0; y < tile; ++y)
                for (int x = 0; x < tile; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        crop.at(y, x, ch) = padded.at(y0 + y, x0 + x, ch);
            Tensor<float> c = net_.forward(image_to_chw(crop));
            Image cimg = chw_to_image(c);
            for (int y = 0; y < tile; ++y)
                for (int x = 0; x < tile; ++x) {
                    const double w = feather_weight(y, tile, overlap) * feather_weight(x, tile, overlap);
                    weight[static_cast<size_t>(y0 + y) * pad_w + x0 + x] += w;
                    for (int ch = 0; ch < k; ++ch)
                        acc.at(y0 + y, x0 + x, ch) += static_cast<float>(w * cimg.at(y, x, ch));
                }
        }

    out.map = Image(rgb.height, rgb.width, k);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            const double w = weight[static_cast<size_t>(y) * pad_w + x];
            for (int ch = 0; ch < k; ++ch)
                out.map.at(y, x, ch) = static_cast<float>(acc.at(y, x, ch) / w);
        }
    return out;
}

}  // namespace stainsep
