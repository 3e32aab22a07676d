// The five training loss terms and their weighted sum. All L1 terms use
// the mean-absolute-error convention so weights stay comparable across
// patch sizes.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "stainsep/encoder.hpp"
#include "stainsep/tensor.hpp"

namespace stainsep {

struct LossWeights {
    double lambda_ent = 0.05;
    double lambda_col = 1.0;
    double lambda_ov = 0.1;
    double lambda_mask = 0.5;
    double perceptual_weight = 2.0;

    void validate() const {
        if (lambda_ent < 0 || lambda_col < 0 || lambda_ov < 0 || lambda_mask < 0)
            throw TensorError("LossWeights: weights must be nonnegative");
    }
};

struct LossReport {
    double rec_l1 = 0, rec_perceptual = 0, ent = 0, col = 0, ov = 0, mask = 0, total = 0;
    std::int64_t omega_tau = 0;      // pixels above the entropy threshold
    std::int64_t omega_mask = 0;     // masked pixels
    std::int64_t overlap_pixels = 0; // pixels in >1 top set
};

inline std::string loss_report_csv_header() {
    return "step,rec_l1,rec_perc,ent,col,ov,mask,total,omega_tau,omega_mask";
}

std::string loss_report_csv_row(std::int64_t step, const LossReport& r);

// ---------------------------------------------------------------------------
// fixed multi-scale feature extractor standing in for pretrained
// perceptual features; filters are seeded and frozen. An externally
// supplied bank can be loaded through the checkpoint tensor container.

template <typename T>
struct FeatureExtractor {
    std::vector<ConvLayer<T>> stages;   // empty -> identity (features = input)

    static FeatureExtractor seeded(std::uint64_t seed,
                                   std::vector<int> widths = {16, 32, 64, 64}) {
        FeatureExtractor fx;
        Rng rng(derive_seed(seed, 0xFEA7));
        int in_ch = 3;
        for (size_t i = 0; i < widths.size(); ++i) {
            ConvLayer<T> l = make_conv<T>(in_ch, widths[i], 3, rng, /*trainable=*/false);
            l.stride = (i == 0) ? 1 : 2;
            fx.stages.push_back(std::move(l));
            in_ch = widths[i];
        }
        return fx;
    }

    static FeatureExtractor identity() { return FeatureExtractor{}; }

    std::vector<Tensor<T>> features(const Tensor<T>& x) const {
        if (stages.empty()) return {x};
        std::vector<Tensor<T>> out;
        Tensor<T> h = x;
        for (const auto& stage : stages) {
            h = relu(stage.forward(h));
            out.push_back(h);
        }
        return out;
    }

    int taps() const { return stages.empty() ? 1 : static_cast<int>(stages.size()); }
};

// ---------------------------------------------------------------------------

template <typename T>
struct RecLoss {
    Tensor<T> l1;
    Tensor<T> perceptual;   // averaged over taps, unweighted
    Tensor<T> combined;     // l1 + perceptual_weight * perceptual
};

template <typename T>
RecLoss<T> loss_reconstruction(const Tensor<T>& xhat, const Tensor<T>& x,
                               const FeatureExtractor<T>& extractor,
                               double perceptual_weight) {
    if (xhat.shape() != x.shape())
        op_shape_error("loss_reconstruction", xhat.shape(), x.shape());
    RecLoss<T> out;
    out.l1 = mean(abs_t(sub(xhat, x)));
    auto fa = extractor.features(xhat);
    auto fb = extractor.features(x);
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (size_t i = 0; i < fa.size(); ++i)
        acc = add(acc, mean(abs_t(sub(fa[i], fb[i]))));
    out.perceptual = scale(acc, T(1) / T(fa.size()));
    out.combined = add(out.l1, scale(out.perceptual, static_cast<T>(perceptual_weight)));
    return out;
}

template <typename T>
struct EntropyLoss {
    Tensor<T> value;
    std::int64_t omega_count = 0;
};

// mean Shannon entropy of the channel-normalized concentrations over
// pixels whose total mass exceeds tau; 0 on an empty set.
template <typename T>
EntropyLoss<T> loss_entropy(const Tensor<T>& c, double tau, double eps = 1e-8) {
    if (c.shape().size() != 4)
        throw TensorError("loss_entropy: expects [N,K,H,W], got " + shape_str(c.shape()));
    if (!(tau > 0)) throw TensorError("loss_entropy: tau must be > 0");
    Tensor<T> total = sum_channels(c);                       // [N,1,H,W]
    Tensor<T> gate = Tensor<T>::zeros(total.shape());        // constant membership
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < total.size(); ++i)
        if (total.data()[i] > static_cast<T>(tau)) {
            gate.data()[i] = T(1);
            ++count;
        }
    EntropyLoss<T> out;
    out.omega_count = count;
    if (count == 0) {
        out.value = Tensor<T>::scalar(T(0));
        return out;
    }
    Tensor<T> p = div(c, add(total, static_cast<T>(eps)));
    Tensor<T> ent = scale(sum_channels(mul(p, log_eps(p, static_cast<T>(eps)))), T(-1));
    out.value = scale(masked_sum(ent, gate), T(1) / T(count));
    return out;
}

// elementwise L1 anchor of the learnable basis to its initialization
template <typename T>
Tensor<T> loss_color(const Tensor<T>& s_phi, const Tensor<T>& s_tilde) {
    if (s_phi.shape() != s_tilde.shape())
        op_shape_error("loss_color", s_phi.shape(), s_tilde.shape());
    return mean(abs_t(sub(s_phi, s_tilde)));
}

template <typename T>
struct OverlapLoss {
    double value = 0;            // exact top-p overlap count, Eq-style
    Tensor<T> objective;         // same value, gradient through a surrogate
    std::int64_t overlap_pixels = 0;
};

// Top-p overlap penalty. Membership in the per-channel top sets is
// recomputed from the forward values and frozen within the step; the
// gradient flows through the mean of the non-dominant in-set values.
template <typename T>
OverlapLoss<T> loss_topk_overlap(const Tensor<T>& c, double p) {
    if (c.shape().size() != 4)
        throw TensorError("loss_topk_overlap: expects [N,K,H,W], got " + shape_str(c.shape()));
    if (!(p > 0 && p < 1)) throw TensorError("loss_topk_overlap: p must be in (0,1)");
    const int n = c.shape()[0], k = c.shape()[1];
    const std::int64_t npix = static_cast<std::int64_t>(c.shape()[2]) * c.shape()[3];
    const double denom_pixels = std::max(p * static_cast<double>(npix), 1.0);
    const std::int64_t top_m =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(p * static_cast<double>(npix))));

    OverlapLoss<T> out;
    if (k == 1) {
        out.objective = Tensor<T>::scalar(T(0));
        return out;
    }

    Tensor<T> surrogate_mask = Tensor<T>::zeros(c.shape());
    std::vector<std::int64_t> order(npix);
    std::vector<std::uint8_t> in_top(static_cast<size_t>(k) * npix);
    double exact_sum = 0.0;
    std::int64_t surrogate_count = 0;

    for (int img = 0; img < n; ++img) {
        std::fill(in_top.begin(), in_top.end(), 0);
        const T* base = c.data().data() + static_cast<std::int64_t>(img) * k * npix;
        for (int ch = 0; ch < k; ++ch) {
            const T* vals = base + static_cast<std::int64_t>(ch) * npix;
            std::iota(order.begin(), order.end(), 0);
            // ties broken by pixel index for determinism
            std::nth_element(order.begin(), order.begin() + (top_m - 1), order.end(),
                             [vals](std::int64_t a, std::int64_t b) {
                                 if (vals[a] != vals[b]) return vals[a] > vals[b];
                                 return a < b;
                             });
            for (std::int64_t i = 0; i < top_m; ++i)
                in_top[static_cast<size_t>(ch) * npix + order[i]] = 1;
        }
        for (std::int64_t px = 0; px < npix; ++px) {
            int members = 0, dominant = -1;
            T best = T(0);
            for (int ch = 0; ch < k; ++ch)
                if (in_top[static_cast<size_t>(ch) * npix + px]) {
                    ++members;
                    const T v = base[static_cast<std::int64_t>(ch) * npix + px];
                    if (dominant < 0 || v > best) { best = v; dominant = ch; }
                }
            if (members > 1) {
                exact_sum += members - 1;
                ++out.overlap_pixels;
                T* mbase = surrogate_mask.data().data() + static_cast<std::int64_t>(img) * k * npix;
                for (int ch = 0; ch < k; ++ch)
                    if (ch != dominant && in_top[static_cast<size_t>(ch) * npix + px]) {
                        mbase[static_cast<std::int64_t>(ch) * npix + px] = T(1);
                        ++surrogate_count;
                    }
            }
        }
    }
    out.value = exact_sum / (denom_pixels * n);

    if (surrogate_count == 0 || !c.requires_grad()) {
        out.objective = Tensor<T>::scalar(static_cast<T>(out.value));
        return out;
    }
    Tensor<T> surrogate = scale(masked_sum(c, surrogate_mask), T(1) / T(surrogate_count));
    // value reported and optimized is the exact count; the surrogate only
    // shapes the gradient
    out.objective = add(surrogate, static_cast<T>(out.value - surrogate.item()));
    return out;
}

template <typename T>
struct MaskLoss {
    Tensor<T> value;
    std::int64_t masked_count = 0;
};

// 1 - share of the designated channel, averaged over masked pixels
template <typename T>
MaskLoss<T> loss_mask_dominance(const Tensor<T>& c, const Tensor<T>& mask, int c_star,
                                double eps = 1e-8) {
    if (c.shape().size() != 4)
        throw TensorError("loss_mask_dominance: expects [N,K,H,W], got " + shape_str(c.shape()));
    const int k = c.shape()[1];
    if (c_star < 0 || c_star >= k)
        throw TensorError("loss_mask_dominance: channel " + std::to_string(c_star) +
                          " out of range [0," + std::to_string(k) + ")");
    Shape want = {c.shape()[0], 1, c.shape()[2], c.shape()[3]};
    if (mask.shape() != want)
        op_shape_error("loss_mask_dominance(mask)", mask.shape(), want);
    MaskLoss<T> out;
    for (T v : mask.data())
        if (v != T(0)) ++out.masked_count;
    if (out.masked_count == 0) {
        out.value = Tensor<T>::scalar(T(0));
        return out;
    }
    Tensor<T> share = div(slice_channels(c, c_star, 1),
                          add(sum_channels(c), static_cast<T>(eps)));
    Tensor<T> term = sub(T(1), share);
    out.value = scale(masked_sum(term, mask), T(1) / T(out.masked_count));
    return out;
}

template <typename T>
struct LossBundle {
    Tensor<T> total;
    LossReport report;
};

template <typename T>
LossBundle<T> loss_total(const RecLoss<T>& rec, const EntropyLoss<T>& ent,
                         const Tensor<T>& col, const OverlapLoss<T>& ov,
                         const MaskLoss<T>& mask, const LossWeights& w) {
    w.validate();
    LossBundle<T> out;
    out.total = rec.combined;
    if (w.lambda_ent > 0) out.total = add(out.total, scale(ent.value, static_cast<T>(w.lambda_ent)));
    if (w.lambda_col > 0) out.total = add(out.total, scale(col, static_cast<T>(w.lambda_col)));
    if (w.lambda_ov > 0) out.total = add(out.total, scale(ov.objective, static_cast<T>(w.lambda_ov)));
    if (w.lambda_mask > 0) out.total = add(out.total, scale(mask.value, static_cast<T>(w.lambda_mask)));

    out.report.rec_l1 = rec.l1.item();
    out.report.rec_perceptual = rec.perceptual.item();
    out.report.ent = ent.value.item();
    out.report.col = col.item();
    out.report.ov = ov.value;
    out.report.mask = mask.value.item();
    out.report.total = out.total.item();
    out.report.omega_tau = ent.omega_count;
    out.report.omega_mask = mask.masked_count;
    out.report.overlap_pixels = ov.overlap_pixels;
    return out;
}

}  // namespace stainsep
