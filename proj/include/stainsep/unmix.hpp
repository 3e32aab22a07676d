// Matrix-based deconvolution baselines: pseudoinverse unmixing for
// K <= 3 and per-pixel nonnegative least squares (Lawson-Hanson active
// set) for any K.
#pragma once

#include <cstdint>
#include <vector>

#include "stainsep/stain.hpp"

namespace stainsep {

class UnmixError : public std::runtime_error {
public:
    explicit UnmixError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PinvResult {
    Image concentrations;   // H x W x K, negatives clamped to 0
    Image preclamp;         // raw least-squares solution
    double condition = 0.0; // condition number of S
};

struct NnlsResult {
    Image concentrations;           // H x W x K, >= 0 by construction
    std::vector<float> residual;    // per-pixel ||S c - od||_2
    std::vector<std::uint8_t> converged;  // per-pixel flag
};

PinvResult pinv_unmix(const StainMatrix& s, const Image& rgb, double od_eps = kDefaultOdEps);

// max_iter <= 0 selects the default 3*K
NnlsResult nnls_unmix(const StainMatrix& s, const Image& rgb, int max_iter = 0,
                      double tol = 1e-8, double od_eps = kDefaultOdEps);

// single-system NNLS used per pixel; exposed for tests.
// a is row-major m x n, returns x >= 0 minimizing ||a x - b||.
bool nnls_solve(const double* a, int m, int n, const double* b, double* x,
                int max_iter, double tol);

}  // namespace stainsep
