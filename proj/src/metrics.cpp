#include "stainsep/metrics.hpp"

#include <cmath>
#include <sstream>

namespace stainsep {

std::vector<double> channel_crossover(const Image& c) {
    const int k = c.channels;
    const size_t npix = static_cast<size_t>(c.height) * c.width;
    std::vector<double> norm2(k, 0.0);
    for (size_t p = 0; p < npix; ++p)
        for (int ch = 0; ch < k; ++ch) {
            const double v = c.values[p * k + ch];
            norm2[ch] += v * v;
        }
    std::vector<double> out(static_cast<size_t>(k) * k, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = i; j < k; ++j) {
            double v = 0.0;
            if (norm2[i] > 0.0 && norm2[j] > 0.0) {
                double dot = 0.0;
                for (size_t p = 0; p < npix; ++p)
                    dot += static_cast<double>(c.values[p * k + i]) * c.values[p * k + j];
                v = dot / std::sqrt(norm2[i] * norm2[j]);
            }
            out[i * k + j] = out[j * k + i] = v;
        }
    return out;
}

namespace {

// 11x11 gaussian window, sigma 1.5, normalized
const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        std::vector<double> win(11 * 11);
        double total = 0.0;
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 11; ++x) {
                const double dy = y - 5, dx = x - 5;
                win[y * 11 + x] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
                total += win[y * 11 + x];
            }
        for (auto& v : win) v /= total;
        return win;
    }();
    return w;
}

double ssim_channel(const Image& a, const Image& b, int ch) {
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto& win = ssim_window();
    const int h = a.height, w = a.width;
    if (h < 11 || w < 11)
        throw MetricsError("reconstruction_metrics: images must be at least 11x11 for SSIM");
    double acc = 0.0;
    std::int64_t count = 0;
    for (int y = 0; y + 11 <= h; ++y)
        for (int x = 0; x + 11 <= w; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int wy = 0; wy < 11; ++wy)
                for (int wx = 0; wx < 11; ++wx) {
                    const double g = win[wy * 11 + wx];
                    const double va = a.at(y + wy, x + wx, ch);
                    const double vb = b.at(y + wy, x + wx, ch);
                    mx += g * va; my += g * vb;
                    sxx += g * va * va; syy += g * vb * vb; sxy += g * va * vb;
                }
            sxx -= mx * mx; syy -= my * my; sxy -= mx * my;
            acc += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                   ((mx * mx + my * my + c1) * (sxx + syy + c2));
            ++count;
        }
    return acc / count;
}

}  // namespace

ReconMetrics reconstruction_metrics(const Image& xhat, const Image& x) {
    if (!xhat.same_dims(x))
        throw MetricsError("reconstruction_metrics: shape mismatch");
    ReconMetrics m;
    double l1 = 0.0, mse = 0.0;
    for (size_t i = 0; i < x.values.size(); ++i) {
        const double d = static_cast<double>(xhat.values[i]) - x.values[i];
        l1 += std::abs(d);
        mse += d * d;
    }
    l1 /= x.values.size();
    mse /= x.values.size();
    m.mean_l1 = l1;
    m.psnr = mse > 0.0 ? std::min(100.0, -10.0 * std::log10(mse)) : 100.0;
    double ssim = 0.0;
    for (int ch = 0; ch < x.channels; ++ch) ssim += ssim_channel(xhat, x, ch);
    m.ssim = ssim / x.channels;
    return m;
}

CrossoverStats mean_crossover_over_corpus(const std::vector<std::vector<double>>& matrices) {
    if (matrices.empty())
        throw MetricsError("mean_crossover_over_corpus: empty corpus");
    const size_t n = matrices[0].size();
    const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    CrossoverStats stats;
    stats.K = k;
    stats.mean.assign(n, 0.0);
    stats.stddev.assign(n, 0.0);
    for (const auto& m : matrices) {
        if (m.size() != n)
            throw MetricsError("mean_crossover_over_corpus: inconsistent matrix sizes");
        for (size_t i = 0; i < n; ++i) stats.mean[i] += m[i];
    }
    for (auto& v : stats.mean) v /= matrices.size();
    for (const auto& m : matrices)
        for (size_t i = 0; i < n; ++i) {
            const double d = m[i] - stats.mean[i];
            stats.stddev[i] += d * d;
        }
    for (auto& v : stats.stddev) v = std::sqrt(v / matrices.size());
    return stats;
}

std::string crossover_csv(const std::vector<std::string>& names, const std::vector<double>& matrix) {
    const int k = static_cast<int>(names.size());
    std::ostringstream os;
    os << "stain";
    for (const auto& n : names) os << "," << n;
    os << "\n";
    os.precision(9);
    for (int i = 0; i < k; ++i) {
        os << names[i];
        for (int j = 0; j < k; ++j) os << "," << matrix[i * k + j];
        os << "\n";
    }
    return os.str();
}

}  // namespace stainsep
