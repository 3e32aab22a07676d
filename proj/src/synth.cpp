#include "stainsep/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "stainsep/formats.hpp"
#include "stainsep/rng.hpp"

namespace stainsep {

void SceneSpec::validate() const {
    const int k = true_stains.K();
    if (k < 1) throw StainError("SceneSpec: no stain columns");
    if (static_cast<int>(blobs.size()) != k)
        throw StainError("SceneSpec: " + std::to_string(blobs.size()) + " blob specs for " +
                         std::to_string(k) + " stains");
    for (const auto& b : blobs) {
        if (b.radius_min < 1.0 || b.radius_max < b.radius_min)
            throw StainError("SceneSpec: blob radius range invalid (min 1 px)");
        if (b.count_min < 0 || b.count_max < b.count_min)
            throw StainError("SceneSpec: blob count range invalid");
    }
    for (const auto& p : co_stains) {
        if (p.a < 0 || p.a >= k || p.b < 0 || p.b >= k || p.a == p.b)
            throw StainError("SceneSpec: co-stain channels out of range");
        if (p.prob < 0.0 || p.prob > 1.0)
            throw StainError("SceneSpec: co-stain probability outside [0,1]");
    }
    if (noise_sigma < 0.0) throw StainError("SceneSpec: negative noise sigma");
}

namespace {

struct Blob {
    double cy, cx, sigma, peak;
};

void splat(Image& c, int channel, const Blob& b) {
    const int k = c.channels;
    const int y0 = std::max(0, static_cast<int>(std::floor(b.cy - 3.0 * b.sigma)));
    const int y1 = std::min(c.height - 1, static_cast<int>(std::ceil(b.cy + 3.0 * b.sigma)));
    const int x0 = std::max(0, static_cast<int>(std::floor(b.cx - 3.0 * b.sigma)));
    const int x1 = std::min(c.width - 1, static_cast<int>(std::ceil(b.cx + 3.0 * b.sigma)));
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
            c.values[(static_cast<size_t>(y) * c.width + x) * k + channel] +=
                static_cast<float>(b.peak * std::exp(-d2 * inv));
        }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) { return generate_scene(spec, spec.seed); }

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    const int k = spec.true_stains.K();
    Rng rng(derive_seed(seed, 0x5CE4E));

    Image c(spec.height, spec.width, k, static_cast<float>(spec.background));
    std::vector<std::vector<Blob>> blobs_per_stain(k);
    for (int ch = 0; ch < k; ++ch) {
        const auto& st = spec.blobs[ch];
        const int count = rng.uniform_int(st.count_min, st.count_max);
        for (int i = 0; i < count; ++i) {
            Blob b;
            b.cy = rng.uniform(0.0, spec.height);
            b.cx = rng.uniform(0.0, spec.width);
            b.sigma = rng.uniform(st.radius_min, st.radius_max);
            b.peak = rng.uniform(st.peak_min, st.peak_max);
            blobs_per_stain[ch].push_back(b);
            splat(c, ch, b);
        }
    }
    for (const auto& pair : spec.co_stains)
        for (const auto& b : blobs_per_stain[pair.a])
            if (rng.uniform() < pair.prob) {
                Blob dup = b;
                dup.peak *= rng.uniform(pair.scale_min, pair.scale_max);
                splat(c, pair.b, dup);
            }

    Scene scene;
    scene.stains = spec.true_stains;
    scene.truth.map = c;
    scene.truth.names = spec.true_stains.names;
    scene.rgb = bl_decode(spec.true_stains, c);
    if (spec.noise_sigma > 0.0)
        for (auto& v : scene.rgb.values)
            v = static_cast<float>(
                std::clamp(static_cast<double>(v) + rng.normal(0.0, spec.noise_sigma), 0.0, 1.0));
    return scene;
}

SceneSpec default_scene_spec() {
    SceneSpec spec;
    spec.true_stains = normalize_columns(colorectal_panel_initial());
    spec.blobs.assign(spec.true_stains.K(), BlobStats{});
    // H is dense nuclear background, CD8 sparse and intense
    spec.blobs[0] = {8, 16, 3.0, 8.0, 0.3, 0.9};
    spec.blobs[4] = {1, 4, 2.0, 4.0, 1.0, 1.8};
    // nuclear co-staining between H and CDX2
    spec.co_stains = {{0, 1, 0.35, 0.3, 1.0}};
    return spec;
}

SceneSpec load_scene_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open '" + path + "'");
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
    SceneSpec spec;
    try {
        spec.height = doc.value("height", 128);
        spec.width = doc.value("width", 128);
        spec.true_stains.names = doc.at("names").get<std::vector<std::string>>();
        for (const auto& col : doc.at("columns"))
            spec.true_stains.columns.push_back(
                {col.at(0).get<double>(), col.at(1).get<double>(), col.at(2).get<double>()});
        spec.blobs.assign(spec.true_stains.K(), BlobStats{});
        if (doc.contains("blobs")) {
            const auto& bl = doc["blobs"];
            if (bl.size() != spec.blobs.size())
                throw FormatError("'" + path + "': blobs entries must match stain count");
            for (size_t i = 0; i < bl.size(); ++i) {
                auto& b = spec.blobs[i];
                b.count_min = bl[i].value("count_min", b.count_min);
                b.count_max = bl[i].value("count_max", b.count_max);
                b.radius_min = bl[i].value("radius_min", b.radius_min);
                b.radius_max = bl[i].value("radius_max", b.radius_max);
                b.peak_min = bl[i].value("peak_min", b.peak_min);
                b.peak_max = bl[i].value("peak_max", b.peak_max);
            }
        }
        if (doc.contains("co_stains"))
            for (const auto& p : doc["co_stains"]) {
                CoStainPair pair;
                pair.a = p.at("a").get<int>();
                pair.b = p.at("b").get<int>();
                pair.prob = p.at("prob").get<double>();
                pair.scale_min = p.value("scale_min", pair.scale_min);
                pair.scale_max = p.value("scale_max", pair.scale_max);
                spec.co_stains.push_back(pair);
            }
        spec.background = doc.value("background", 0.0);
        spec.noise_sigma = doc.value("noise_sigma", 0.01);
        spec.seed = doc.value("seed", 0ull);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': " + e.what());
    }
    spec.validate();
    return spec;
}

double column_angle_deg(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double na = column_norm(a), nb = column_norm(b);
    if (na == 0.0 || nb == 0.0) return 90.0;
    double cosv = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    cosv = std::clamp(cosv, -1.0, 1.0);
    return std::acos(cosv) * 180.0 / 3.14159265358979323846;
}

namespace {

double channel_dot(const Image& a, int ca, const Image& b, int cb) {
    double acc = 0.0;
    const size_t npix = static_cast<size_t>(a.height) * a.width;
    for (size_t p = 0; p < npix; ++p)
        acc += static_cast<double>(a.values[p * a.channels + ca]) * b.values[p * b.channels + cb];
    return acc;
}

double pearson(const Image& a, int ca, const Image& b, int cb) {
    const size_t npix = static_cast<size_t>(a.height) * a.width;
    double ma = 0, mb = 0;
    for (size_t p = 0; p < npix; ++p) {
        ma += a.values[p * a.channels + ca];
        mb += b.values[p * b.channels + cb];
    }
    ma /= npix; mb /= npix;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t p = 0; p < npix; ++p) {
        const double da = a.values[p * a.channels + ca] - ma;
        const double db = b.values[p * b.channels + cb] - mb;
        sab += da * db; saa += da * da; sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

RecoveryReport recovery_score(const Image& c_est, const Image& c_true,
                              const StainMatrix* s_est, const StainMatrix* s_true) {
    const int k = c_true.channels;
    if (c_est.channels != k || c_est.height != c_true.height || c_est.width != c_true.width)
        throw StainError("recovery_score: estimate " + std::to_string(c_est.channels) +
                         " channels vs truth " + std::to_string(k));
    if (k > 8) throw StainError("recovery_score: supports up to 8 channels");
    if ((s_est == nullptr) != (s_true == nullptr))
        throw StainError("recovery_score: provide both stain matrices or neither");

    // score of pairing truth channel i with estimate channel j
    std::vector<double> pair_score(static_cast<size_t>(k) * k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            if (s_true) {
                pair_score[i * k + j] =
                    std::cos(column_angle_deg(s_est->columns[j], s_true->columns[i]) *
                             3.14159265358979323846 / 180.0);
            } else {
                pair_score[i * k + j] = pearson(c_est, j, c_true, i);
            }
        }

    // optimal assignment by exhaustive search (K <= 8)
    std::vector<int> perm(k), best(k);
    std::iota(perm.begin(), perm.end(), 0);
    double best_score = -1e300;
    do {
        double s = 0;
        for (int i = 0; i < k; ++i) s += pair_score[i * k + perm[i]];
        if (s > best_score) { best_score = s; best = perm; }
    } while (std::next_permutation(perm.begin(), perm.end()));

    RecoveryReport rep;
    rep.matching = best;
    for (int i = 0; i < k; ++i) {
        const int j = best[i];
        const double ee = channel_dot(c_est, j, c_est, j);
        const double et = channel_dot(c_est, j, c_true, i);
        rep.scale.push_back(ee > 0.0 ? et / ee : 0.0);
        rep.correlation.push_back(pearson(c_est, j, c_true, i));
        if (s_true)
            rep.angular_error_deg.push_back(column_angle_deg(s_est->columns[j], s_true->columns[i]));
    }
    rep.mean_correlation =
        std::accumulate(rep.correlation.begin(), rep.correlation.end(), 0.0) / k;
    if (!rep.angular_error_deg.empty())
        rep.mean_angular_error_deg =
            std::accumulate(rep.angular_error_deg.begin(), rep.angular_error_deg.end(), 0.0) / k;
    return rep;
}

}  // namespace stainsep
