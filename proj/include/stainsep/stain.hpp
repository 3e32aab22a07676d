// Beer-Lambert stain model: optical density conversion, the 3xK stain
// basis and the exponential decoder, plus single-channel and knock-out
// renders.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "stainsep/image.hpp"
#include "stainsep/tensor.hpp"

namespace stainsep {

struct StainMatrix {
    std::vector<std::string> names;                 // one per stain
    std::vector<std::array<double, 3>> columns;     // OD vectors, one per stain
    bool normalized = false;

    int K() const { return static_cast<int>(columns.size()); }
};

struct ConcentrationMap {
    Image map;                          // H x W x K, nonnegative
    std::vector<std::string> names;     // aligned with a StainMatrix
};

class StainError : public std::runtime_error {
public:
    explicit StainError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr double kDefaultOdEps = 1e-6;

// o = -log(x + eps). clamp_negative drops the tiny negative OD that eps
// produces near white; the training path keeps it unclamped.
Image rgb_to_od(const Image& x, double eps = kDefaultOdEps, bool clamp_negative = true);
Image od_to_rgb(const Image& od);

Image bl_decode(const StainMatrix& s, const Image& concentrations);
Image render_single_channel(const StainMatrix& s, const Image& concentrations, int k);
Image render_knockout(const StainMatrix& s, const Image& concentrations, int k);

StainMatrix normalize_columns(const StainMatrix& s);
double column_norm(const std::array<double, 3>& col);

// The five-stain basis reported for the colorectal panel, used as the
// default initialization and throughout the synthetic tests.
StainMatrix colorectal_panel_initial();
StainMatrix colorectal_panel_learned();

// ---------------------------------------------------------------------------
// differentiable decode path

// columns of s ([3,K]) scaled to unit Euclidean norm
template <typename T>
Tensor<T> normalize_stain_columns(const Tensor<T>& s) {
    if (s.shape().size() != 2 || s.shape()[0] != 3)
        throw TensorError("normalize_stain_columns: expects [3,K], got " + shape_str(s.shape()));
    Tensor<T> ones = Tensor<T>::full({1, 3}, T(1));
    Tensor<T> col_sq = matmul(ones, mul(s, s));       // [1,K]
    Tensor<T> norm = sqrt_t(add(col_sq, T(1e-12)));
    return div(s, norm);
}

// x_hat = exp(-S c) on a [N,K,H,W] concentration batch; S is [3,K]
template <typename T>
Tensor<T> bl_decode_diff(const Tensor<T>& s, const Tensor<T>& c) {
    if (s.shape().size() != 2 || s.shape()[0] != 3)
        throw TensorError("bl_decode_diff: stain matrix must be [3,K], got " + shape_str(s.shape()));
    if (c.shape().size() != 4 || c.shape()[1] != s.shape()[1])
        throw TensorError("bl_decode_diff: K mismatch, S " + shape_str(s.shape()) +
                          " vs C " + shape_str(c.shape()));
    const int k = s.shape()[1];
    Tensor<T> kernel = reshape(s, {3, k, 1, 1});
    Tensor<T> od = conv2d(c, kernel, 1, 0);
    return exp_t(scale(od, T(-1)));
}

}  // namespace stainsep
