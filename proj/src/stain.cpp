#include "stainsep/stain.hpp"

#include <cmath>
#include <sstream>

namespace stainsep {

Image rgb_to_od(const Image& x, double eps, bool clamp_negative) {
    if (eps <= 0.0) throw StainError("rgb_to_od: eps must be > 0");
    float lo = 1.0f, hi = 0.0f;
    for (float v : x.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo < 0.0f || hi > 1.0f) {
        std::ostringstream os;
        os << "rgb_to_od: pixel values outside [0,1], min=" << lo << " max=" << hi;
        throw StainError(os.str());
    }
    Image od(x.height, x.width, x.channels);
    for (size_t i = 0; i < x.values.size(); ++i) {
        double v = -std::log(static_cast<double>(x.values[i]) + eps);
        if (clamp_negative && v < 0.0) v = 0.0;
        od.values[i] = static_cast<float>(v);
    }
    return od;
}

Image od_to_rgb(const Image& od) {
    Image x(od.height, od.width, od.channels);
    for (size_t i = 0; i < od.values.size(); ++i)
        x.values[i] = static_cast<float>(std::exp(-static_cast<double>(od.values[i])));
    return x;
}

Image bl_decode(const StainMatrix& s, const Image& concentrations) {
    const int k = s.K();
    if (concentrations.channels != k)
        throw StainError("bl_decode: stain matrix has " + std::to_string(k) +
                         " columns but concentration map has " +
                         std::to_string(concentrations.channels) + " channels");
    Image out(concentrations.height, concentrations.width, 3);
    const size_t npix = static_cast<size_t>(concentrations.height) * concentrations.width;
    for (size_t p = 0; p < npix; ++p) {
        double od[3] = {0.0, 0.0, 0.0};
        const float* c = concentrations.values.data() + p * k;
        for (int j = 0; j < k; ++j) {
            const double cj = c[j];
            od[0] += s.columns[j][0] * cj;
            od[1] += s.columns[j][1] * cj;
            od[2] += s.columns[j][2] * cj;
        }
        float* o = out.values.data() + p * 3;
        for (int ch = 0; ch < 3; ++ch) o[ch] = static_cast<float>(std::exp(-od[ch]));
    }
    return out;
}

static void check_channel(const StainMatrix& s, int k, const char* op) {
    if (k < 0 || k >= s.K())
        throw StainError(std::string(op) + ": channel " + std::to_string(k) +
                         " out of range [0," + std::to_string(s.K()) + ")");
}

Image render_single_channel(const StainMatrix& s, const Image& concentrations, int k) {
    check_channel(s, k, "render_single_channel");
    Image only(concentrations.height, concentrations.width, concentrations.channels);
    const size_t npix = static_cast<size_t>(concentrations.height) * concentrations.width;
    for (size_t p = 0; p < npix; ++p)
        only.values[p * concentrations.channels + k] =
            concentrations.values[p * concentrations.channels + k];
    return bl_decode(s, only);
}

Image render_knockout(const StainMatrix& s, const Image& concentrations, int k) {
    check_channel(s, k, "render_knockout");
    Image rest = concentrations;
    const size_t npix = static_cast<size_t>(concentrations.height) * concentrations.width;
    for (size_t p = 0; p < npix; ++p) rest.values[p * concentrations.channels + k] = 0.0f;
    return bl_decode(s, rest);
}

double column_norm(const std::array<double, 3>& col) {
    return std::sqrt(col[0] * col[0] + col[1] * col[1] + col[2] * col[2]);
}

StainMatrix normalize_columns(const StainMatrix& s) {
    StainMatrix out = s;
    for (int j = 0; j < s.K(); ++j) {
        const double n = column_norm(s.columns[j]);
        if (n == 0.0)
            throw StainError("normalize_columns: zero column for stain '" +
                             (j < static_cast<int>(s.names.size()) ? s.names[j] : std::to_string(j)) + "'");
        for (int ch = 0; ch < 3; ++ch) out.columns[j][ch] = s.columns[j][ch] / n;
    }
    out.normalized = true;
    return out;
}

StainMatrix colorectal_panel_initial() {
    StainMatrix s;
    s.names = {"H", "CDX2", "MUC2", "MUC5", "CD8"};
    s.columns = {{{0.620, 0.637, 0.458}},
                 {{0.290, 0.832, 0.473}},
                 {{0.033, 0.343, 0.939}},
                 {{0.741, 0.294, 0.604}},
                 {{0.300, 0.491, 0.818}}};
    return s;
}

StainMatrix colorectal_panel_learned() {
    StainMatrix s;
    s.names = {"H", "CDX2", "MUC2", "MUC5", "CD8"};
    s.columns = {{{0.705, 0.581, 0.408}},
                 {{0.242, 0.843, 0.480}},
                 {{0.028, 0.239, 0.971}},
                 {{0.737, 0.300, 0.606}},
                 {{0.330, 0.536, 0.777}}};
    return s;
}

}  // namespace stainsep
