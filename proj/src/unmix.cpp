#include "stainsep/unmix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace stainsep {

namespace {

// Gaussian elimination with partial pivoting on an n x n system.
// Returns false when a pivot falls below the singularity threshold.
bool solve_linear(std::vector<double> a, std::vector<double> b, int n, double* x) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        if (std::abs(a[piv * n + col]) < 1e-12) return false;
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
            std::swap(b[col], b[piv]);
        }
        for (int r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / a[col * n + col];
            for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    for (int r = n - 1; r >= 0; --r) {
        double acc = b[r];
        for (int c = r + 1; c < n; ++c) acc -= a[r * n + c] * x[c];
        x[r] = acc / a[r * n + r];
    }
    return true;
}

// eigenvalues of a small symmetric matrix via cyclic Jacobi rotations
std::vector<double> sym_eigenvalues(std::vector<double> a, int n) {
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a[p * n + q]) < 1e-30) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(n);
    for (int i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

}  // namespace

PinvResult pinv_unmix(const StainMatrix& s, const Image& rgb, double od_eps) {
    const int k = s.K();
    // gram matrix and its spectrum for the rank check
    std::vector<double> gram(k * k, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            for (int ch = 0; ch < 3; ++ch)
                gram[i * k + j] += s.columns[i][ch] * s.columns[j][ch];
    std::vector<double> eig = sym_eigenvalues(gram, k);
    double lmax = 0.0, lmin = std::numeric_limits<double>::max();
    for (double e : eig) {
        lmax = std::max(lmax, e);
        lmin = std::min(lmin, e);
    }
    const double cond = (lmin > 0.0) ? std::sqrt(lmax / lmin) : std::numeric_limits<double>::infinity();
    if (!(lmin > 1e-12 * lmax)) {
        std::ostringstream os;
        os << "pinv_unmix: stain matrix is rank deficient (condition number " << cond << ")";
        throw UnmixError(os.str());
    }

    Image od = rgb_to_od(rgb, od_eps, /*clamp_negative=*/true);
    PinvResult out;
    out.condition = cond;
    out.concentrations = Image(rgb.height, rgb.width, k);
    out.preclamp = Image(rgb.height, rgb.width, k);
    const size_t npix = static_cast<size_t>(rgb.height) * rgb.width;
    std::vector<double> rhs(k), c(k);
    for (size_t p = 0; p < npix; ++p) {
        const float* o = od.values.data() + p * 3;
        for (int i = 0; i < k; ++i)
            rhs[i] = s.columns[i][0] * o[0] + s.columns[i][1] * o[1] + s.columns[i][2] * o[2];
        if (!solve_linear(gram, rhs, k, c.data()))
            throw UnmixError("pinv_unmix: normal equations singular");
        for (int i = 0; i < k; ++i) {
            out.preclamp.values[p * k + i] = static_cast<float>(c[i]);
            out.concentrations.values[p * k + i] = static_cast<float>(std::max(0.0, c[i]));
        }
    }
    return out;
}

bool nnls_solve(const double* a, int m, int n, const double* b, double* x,
                int max_iter, double tol) {
    if (m > 8) throw UnmixError("nnls_solve: supports up to 8 rows");
    std::vector<char> passive(n, 0), banned(n, 0);
    std::vector<double> w(n), z(n);
    std::fill(x, x + n, 0.0);
    int iter = 0;
    for (;;) {
        // dual w = A^T (b - A x)
        double resid[8];  // m <= 3 here, slack for safety
        for (int i = 0; i < m; ++i) {
            double acc = b[i];
            for (int j = 0; j < n; ++j) acc -= a[i * n + j] * x[j];
            resid[i] = acc;
        }
        int t = -1;
        double wmax = tol;
        for (int j = 0; j < n; ++j) {
            if (passive[j] || banned[j]) continue;
            double wj = 0.0;
            for (int i = 0; i < m; ++i) wj += a[i * n + j] * resid[i];
            w[j] = wj;
            if (wj > wmax) { wmax = wj; t = j; }
        }
        if (t < 0) return true;  // dual feasible: optimum reached
        passive[t] = 1;

        for (;;) {
            if (++iter > max_iter) return false;
            // least squares on the passive columns via normal equations
            std::vector<int> idx;
            for (int j = 0; j < n; ++j)
                if (passive[j]) idx.push_back(j);
            const int p = static_cast<int>(idx.size());
            std::vector<double> g(p * p, 0.0), rhs(p, 0.0), zp(p);
            for (int u = 0; u < p; ++u) {
                for (int v = 0; v < p; ++v)
                    for (int i = 0; i < m; ++i)
                        g[u * p + v] += a[i * n + idx[u]] * a[i * n + idx[v]];
                for (int i = 0; i < m; ++i) rhs[u] += a[i * n + idx[u]] * b[i];
            }
            if (!solve_linear(g, rhs, p, zp.data())) {
                // the new column is dependent on the passive set; drop it for good
                passive[t] = 0;
                banned[t] = 1;
                break;
            }
            std::fill(z.begin(), z.end(), 0.0);
            for (int u = 0; u < p; ++u) z[idx[u]] = zp[u];

            bool interior = true;
            for (int u = 0; u < p; ++u)
                if (zp[u] <= tol) { interior = false; break; }
            if (interior) {
                for (int j = 0; j < n; ++j) x[j] = passive[j] ? z[j] : 0.0;
                break;
            }
            // step toward z until the first passive variable hits zero
            double alpha = 1.0;
            for (int u = 0; u < p; ++u)
                if (zp[u] <= tol) {
                    const double xj = x[idx[u]];
                    if (xj - zp[u] > 0.0) alpha = std::min(alpha, xj / (xj - zp[u]));
                }
            for (int u = 0; u < p; ++u) {
                const int j = idx[u];
                x[j] += alpha * (z[j] - x[j]);
                if (x[j] <= tol) { x[j] = 0.0; passive[j] = 0; }
            }
        }
    }
}

NnlsResult nnls_unmix(const StainMatrix& s, const Image& rgb, int max_iter,
                      double tol, double od_eps) {
    const int k = s.K();
    if (max_iter <= 0) max_iter = 3 * k;
    Image od = rgb_to_od(rgb, od_eps, /*clamp_negative=*/true);
    NnlsResult out;
    out.concentrations = Image(rgb.height, rgb.width, k);
    const size_t npix = static_cast<size_t>(rgb.height) * rgb.width;
    out.residual.resize(npix);
    out.converged.assign(npix, 1);

    // row-major 3 x K system shared across pixels
    std::vector<double> a(3 * k);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < k; ++j) a[i * k + j] = s.columns[j][i];

    std::vector<double> x(k);
    for (size_t p = 0; p < npix; ++p) {
        double b[3] = {od.values[p * 3], od.values[p * 3 + 1], od.values[p * 3 + 2]};
        const bool ok = nnls_solve(a.data(), 3, k, b, x.data(), max_iter, tol);
        out.converged[p] = ok ? 1 : 0;
        double r2 = 0.0;
        for (int i = 0; i < 3; ++i) {
            double ri = b[i];
            for (int j = 0; j < k; ++j) ri -= a[i * k + j] * x[j];
            r2 += ri * ri;
        }
        out.residual[p] = static_cast<float>(std::sqrt(r2));
        for (int j = 0; j < k; ++j)
            out.concentrations.values[p * k + j] = static_cast<float>(x[j]);
    }
    return out;
}

}  // namespace stainsep
