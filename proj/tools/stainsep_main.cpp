// stainsep command line: synthetic data generation, patch ingestion,
// training, separation, rendering and evaluation.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "stainsep/formats.hpp"
#include "stainsep/metrics.hpp"
#include "stainsep/png_io.hpp"
#include "stainsep/stain.hpp"
#include "stainsep/synth.hpp"
#include "stainsep/trainer.hpp"
#include "stainsep/unmix.hpp"

namespace fs = std::filesystem;
using namespace stainsep;

namespace {

int resolve_channel(const std::vector<std::string>& names, const std::string& name) {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        std::string have;
        for (const auto& n : names) have += (have.empty() ? "" : ",") + n;
        throw StainError("unknown stain '" + name + "' (have: " + have + ")");
    }
    return static_cast<int>(it - names.begin());
}

std::string scene_basename(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04d", i);
    return buf;
}

int run_synth(const std::string& spec_path, int count, const std::string& out_dir,
              std::optional<std::uint64_t> seed) {
    SceneSpec spec = spec_path.empty() ? default_scene_spec() : load_scene_spec(spec_path);
    if (seed) spec.seed = *seed;
    fs::create_directories(out_dir);
    save_stain_matrix((fs::path(out_dir) / "stains.json").string(), spec.true_stains);
    for (int i = 0; i < count; ++i) {
        Scene scene = generate_scene(spec, derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
        const std::string base = (fs::path(out_dir) / scene_basename(i)).string();
        write_png(base + ".png", scene.rgb);
        save_concentrations(base + ".sqc1", scene.truth);
    }
    return 0;
}

int run_ingest(const std::string& images, double min_tissue, const std::string& out) {
    PatchIndex index = ingest_patches(images, min_tissue);
    save_patch_index(out, index);
    std::cout << index.entries.size() << " patches indexed\n";
    return 0;
}

std::vector<Image> load_training_patches(const std::string& data) {
    std::vector<std::string> paths;
    if (fs::is_directory(data)) {
        for (const auto& e : fs::directory_iterator(data))
            if (e.is_regular_file() && e.path().extension() == ".png")
                paths.push_back(e.path().string());
        std::sort(paths.begin(), paths.end());
    } else {
        for (const auto& e : load_patch_index(data).entries) paths.push_back(e.path);
    }
    if (paths.empty()) throw TrainerError("no training images found in '" + data + "'");
    std::vector<Image> patches;
    patches.reserve(paths.size());
    for (const auto& p : paths) patches.push_back(read_png(p));
    return patches;
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out_dir,
              std::optional<std::uint64_t> seed, std::optional<int> steps) {
    TrainConfig cfg = load_train_config(config_path);
    if (seed) cfg.seed = *seed;
    if (steps) cfg.steps = *steps;
    cfg.validate();
    fs::create_directories(out_dir);
    std::vector<Image> patches = load_training_patches(data);

    std::ofstream csv((fs::path(out_dir) / "loss.csv").string(), std::ios::trunc);
    if (!csv) throw TrainerError("cannot write loss.csv in '" + out_dir + "'");
    const std::string cp_path = (fs::path(out_dir) / "checkpoint.sqck").string();

    Trainer trainer(cfg);
    trainer.run(patches, &csv, [&cp_path](const Checkpoint& cp) { save_checkpoint(cp_path, cp); });
    save_stain_matrix((fs::path(out_dir) / "learned_stains.json").string(), trainer.learned_stains());
    return 0;
}

int run_separate(const std::string& method, const std::string& checkpoint,
                 const std::string& stain_file, const std::string& input,
                 const std::string& out, int tile) {
    if (method == "model" && checkpoint.empty())
        throw ConfigError("separate --method model requires --checkpoint");
    if (method != "model" && stain_file.empty())
        throw ConfigError("separate --method " + method + " requires --stain-matrix");
    Image rgb = read_png(input);
    ConcentrationMap result;
    if (method == "model") {
        Separator sep(load_checkpoint(checkpoint));
        result = sep.separate(rgb, tile);
    } else {
        StainMatrix s = normalize_columns(load_stain_matrix(stain_file));
        result.names = s.names;
        result.map = (method == "nnls") ? nnls_unmix(s, rgb).concentrations
                                        : pinv_unmix(s, rgb).concentrations;
    }
    save_concentrations(out, result);
    return 0;
}

int run_render(const std::string& mode, const std::string& channel,
               const std::string& conc_path, const std::string& checkpoint,
               const std::string& stain_file, const std::string& out) {
    ConcentrationMap c = load_concentrations(conc_path);
    StainMatrix s;
    if (!checkpoint.empty()) {
        s = Separator(load_checkpoint(checkpoint)).stains();
    } else if (!stain_file.empty()) {
        s = normalize_columns(load_stain_matrix(stain_file));
    } else {
        throw ConfigError("render requires --checkpoint or --stain-matrix");
    }
    if (s.K() != c.map.channels)
        throw StainError("stain matrix K=" + std::to_string(s.K()) + " but concentrations have " +
                         std::to_string(c.map.channels) + " channels");
    Image img;
    if (mode == "recon") {
        img = bl_decode(s, c.map);
    } else {
        if (channel.empty()) throw ConfigError("render --mode " + mode + " requires --channel");
        const int k = resolve_channel(c.names, channel);
        img = (mode == "single") ? render_single_channel(s, c.map, k)
                                 : render_knockout(s, c.map, k);
    }
    write_png(out, img);
    return 0;
}

int run_eval(const std::string& pred_path, const std::string& truth_path,
             const std::string& recon_path, const std::string& orig_path,
             const std::string& pred_stains, const std::string& checkpoint,
             const std::string& truth_stains, const std::string& out_prefix) {
    ConcentrationMap pred = load_concentrations(pred_path);

    {
        std::ofstream os(out_prefix + "crossover.csv", std::ios::trunc);
        if (!os) throw FormatError("cannot write '" + out_prefix + "crossover.csv'");
        os << crossover_csv(pred.names, channel_crossover(pred.map));
    }

    if (!truth_path.empty()) {
        ConcentrationMap truth = load_concentrations(truth_path);
        StainMatrix se, st;
        bool have_stains = false;
        if (!truth_stains.empty() && (!pred_stains.empty() || !checkpoint.empty())) {
            st = normalize_columns(load_stain_matrix(truth_stains));
            se = checkpoint.empty() ? normalize_columns(load_stain_matrix(pred_stains))
                                    : Separator(load_checkpoint(checkpoint)).stains();
            have_stains = true;
        }
        RecoveryReport rep = recovery_score(pred.map, truth.map,
                                            have_stains ? &se : nullptr,
                                            have_stains ? &st : nullptr);
        std::ofstream os(out_prefix + "recovery.csv", std::ios::trunc);
        if (!os) throw FormatError("cannot write '" + out_prefix + "recovery.csv'");
        os << "truth_channel,matched_pred_channel,scale,correlation"
           << (have_stains ? ",angular_error_deg" : "") << "\n";
        os.precision(9);
        for (size_t i = 0; i < rep.matching.size(); ++i) {
            os << truth.names[i] << "," << pred.names[rep.matching[i]] << ","
               << rep.scale[i] << "," << rep.correlation[i];
            if (have_stains) os << "," << rep.angular_error_deg[i];
            os << "\n";
        }
        os << "mean,," << "," << rep.mean_correlation;
        if (have_stains) os << "," << rep.mean_angular_error_deg;
        os << "\n";
    }

    if (!recon_path.empty() || !orig_path.empty()) {
        if (recon_path.empty() || orig_path.empty())
            throw ConfigError("eval: --recon and --orig must be given together");
        ReconMetrics m = reconstruction_metrics(read_png(recon_path), read_png(orig_path));
        std::ofstream os(out_prefix + "reconstruction.csv", std::ios::trunc);
        if (!os) throw FormatError("cannot write '" + out_prefix + "reconstruction.csv'");
        os.precision(9);
        os << "mean_l1,psnr,ssim\n" << m.mean_l1 << "," << m.psnr << "," << m.ssim << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stainsep: unsupervised multiplex stain separation"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    int threads = 1;
    app.add_option("--seed", seed, "root RNG seed")->capture_default_str();
    app.add_option("--threads", threads, "worker threads (1 = deterministic mode)")
        ->check(CLI::PositiveNumber);

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic scenes with ground truth");
    std::string synth_spec, synth_out = "synth_out";
    int synth_count = 1;
    synth->add_option("--spec", synth_spec, "scene spec JSON (default: built-in colorectal panel)");
    synth->add_option("--count", synth_count, "number of scenes")->check(CLI::PositiveNumber);
    synth->add_option("--out", synth_out, "output directory");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "index training patches by tissue fraction");
    std::string ingest_images, ingest_out = "patch_index.json";
    double min_tissue = 0.5;
    ingest->add_option("--images", ingest_images, "directory of PNG patches")->required();
    ingest->add_option("--min-tissue", min_tissue, "minimum tissue fraction");
    ingest->add_option("--out", ingest_out, "index file");

    // train
    auto* train = app.add_subcommand("train", "train the separation model");
    std::string train_config, train_data, train_out = "train_out";
    std::optional<int> train_steps;
    train->add_option("--config", train_config, "train config JSON")->required();
    train->add_option("--data", train_data, "patch index file or image directory")->required();
    train->add_option("--out", train_out, "output directory");
    train->add_option("--steps", train_steps, "override step count");

    // separate
    auto* separate = app.add_subcommand("separate", "decompose an image into concentrations");
    std::string sep_method = "model", sep_checkpoint, sep_stains, sep_input, sep_out = "out.sqc1";
    int sep_tile = 128;
    separate->add_option("--method", sep_method, "model, nnls or pinv")
        ->check(CLI::IsMember({"model", "nnls", "pinv"}));
    separate->add_option("--checkpoint", sep_checkpoint, "SQCK checkpoint (model method)");
    separate->add_option("--stain-matrix", sep_stains, "stain matrix JSON (nnls/pinv)");
    separate->add_option("--input", sep_input, "input PNG")->required();
    separate->add_option("--out", sep_out, "output SQC1 file");
    separate->add_option("--tile", sep_tile, "tile size for large inputs");

    // render
    auto* render = app.add_subcommand("render", "render concentrations back to RGB");
    std::string render_mode = "recon", render_channel, render_conc, render_checkpoint,
                render_stains, render_out = "render.png";
    render->add_option("--mode", render_mode, "single, knockout or recon")
        ->check(CLI::IsMember({"single", "knockout", "recon"}));
    render->add_option("--channel", render_channel, "stain name (single/knockout)");
    render->add_option("--concentrations", render_conc, "SQC1 file")->required();
    render->add_option("--checkpoint", render_checkpoint, "SQCK checkpoint for the stain matrix");
    render->add_option("--stain-matrix", render_stains, "stain matrix JSON");
    render->add_option("--out", render_out, "output PNG");

    // eval
    auto* eval = app.add_subcommand("eval", "compute separation and reconstruction metrics");
    std::string eval_pred, eval_truth, eval_recon, eval_orig, eval_pred_stains,
                eval_checkpoint, eval_truth_stains, eval_out = "eval_";
    eval->add_option("--pred", eval_pred, "predicted SQC1")->required();
    eval->add_option("--truth", eval_truth, "ground-truth SQC1");
    eval->add_option("--recon", eval_recon, "reconstructed PNG");
    eval->add_option("--orig", eval_orig, "original PNG");
    eval->add_option("--pred-stains", eval_pred_stains, "predicted stain matrix JSON");
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint holding the learned stains");
    eval->add_option("--truth-stains", eval_truth_stains, "true stain matrix JSON");
    eval->add_option("--out", eval_out, "output CSV prefix");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) return run_synth(synth_spec, synth_count, synth_out, seed);
        if (*ingest) return run_ingest(ingest_images, min_tissue, ingest_out);
        if (*train) return run_train(train_config, train_data, train_out, seed, train_steps);
        if (*separate)
            return run_separate(sep_method, sep_checkpoint, sep_stains, sep_input, sep_out, sep_tile);
        if (*render)
            return run_render(render_mode, render_channel, render_conc, render_checkpoint,
                              render_stains, render_out);
        if (*eval)
            return run_eval(eval_pred, eval_truth, eval_recon, eval_orig, eval_pred_stains,
                            eval_checkpoint, eval_truth_stains, eval_out);
    } catch (const ConfigError& e) {
        std::cerr << "error:config: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error:format: " << e.what() << "\n";
        return 1;
    } catch (const ImageError& e) {
        std::cerr << "error:io: " << e.what() << "\n";
        return 1;
    } catch (const TrainerError& e) {
        std::cerr << "error:train: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error:runtime: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
