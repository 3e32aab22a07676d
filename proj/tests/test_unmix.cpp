#include <doctest.h>

#include <cmath>

#include "stainsep/rng.hpp"
#include "stainsep/unmix.hpp"

using namespace stainsep;

namespace {

StainMatrix first_k(const StainMatrix& s, int k) {
    StainMatrix out;
    out.names.assign(s.names.begin(), s.names.begin() + k);
    out.columns.assign(s.columns.begin(), s.columns.begin() + k);
    out.normalized = s.normalized;
    return out;
}

Image random_concentrations(int h, int w, int k, Rng& rng, double hi = 1.2) {
    Image c;
    c.height = h; c.width = w; c.channels = k;
    c.values.resize(static_cast<size_t>(h) * w * k);
    for (auto& v : c.values) v = static_cast<float>(rng.uniform(0.0, hi));
    return c;
}

}  // namespace

TEST_CASE("pinv exactly inverts a synthetic K=3 decode") {
    Rng rng(101);
    StainMatrix s = first_k(normalize_columns(colorectal_panel_initial()), 3);
    Image c = random_concentrations(8, 8, 3, rng);
    Image rgb = bl_decode(s, c);
    PinvResult r = pinv_unmix(s, rgb);
    REQUIRE(r.concentrations.channels == 3);
    for (size_t i = 0; i < c.values.size(); ++i)
        CHECK(std::abs(r.concentrations.values[i] - c.values[i]) < 1e-4);
    CHECK(r.condition < 20.0);
}

TEST_CASE("a white image unmixes to zero concentrations") {
    StainMatrix s = first_k(normalize_columns(colorectal_panel_initial()), 3);
    Image white;
    white.height = 3; white.width = 3; white.channels = 3;
    white.values.assign(27, 1.0f);
    PinvResult r = pinv_unmix(s, white);
    for (float v : r.concentrations.values) CHECK(std::abs(v) < 1e-5);
    NnlsResult nr = nnls_unmix(s, white);
    for (float v : nr.concentrations.values) CHECK(std::abs(v) < 1e-5);
}

TEST_CASE("K=1 unmixing reduces to a clamped scalar projection") {
    StainMatrix s;
    s.names = {"only"};
    s.columns = {{0.6, 0.6, 0.52915026221}};  // unit-ish
    s = normalize_columns(s);
    Image rgb;
    rgb.height = 1; rgb.width = 1; rgb.channels = 3;
    const double conc = 0.8;
    for (int i = 0; i < 3; ++i)
        rgb.values.push_back(static_cast<float>(std::exp(-s.columns[0][i] * conc)));
    PinvResult r = pinv_unmix(s, rgb);
    CHECK(r.concentrations.values[0] == doctest::Approx(conc).epsilon(1e-4));
    // hand-computed projection oracle: c = <s, od> / <s, s>
    Image od = rgb_to_od(rgb, kDefaultOdEps, false);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < 3; ++i) {
        num += s.columns[0][i] * od.values[i];
        den += s.columns[0][i] * s.columns[0][i];
    }
    CHECK(r.concentrations.values[0] == doctest::Approx(num / den).epsilon(1e-5));
}

TEST_CASE("negative least-squares solutions are clamped but kept in preclamp") {
    StainMatrix s;
    s.names = {"r", "g", "b"};
    s.columns = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
    s.normalized = true;
    Image rgb;
    rgb.height = 1; rgb.width = 1; rgb.channels = 3;
    // od = (0.5, ~0, 0.2); middle channel od slightly negative pre-clamp
    rgb.values = {static_cast<float>(std::exp(-0.5)), 1.0f, static_cast<float>(std::exp(-0.2))};
    PinvResult r = pinv_unmix(s, rgb);
    CHECK(r.concentrations.values[0] == doctest::Approx(0.5).epsilon(1e-4));
    CHECK(r.concentrations.values[1] >= 0.0f);
    CHECK(r.preclamp.values[1] <= 0.0f);
    CHECK(r.concentrations.values[2] == doctest::Approx(0.2).epsilon(1e-4));
}

TEST_CASE("rank-deficient bases are rejected with the condition number") {
    StainMatrix s;
    s.names = {"a", "b", "c"};
    s.columns = {{0.6, 0.6, 0.53}, {0.6, 0.6, 0.53}, {0.0, 0.7, 0.7}};
    Image rgb;
    rgb.height = 1; rgb.width = 1; rgb.channels = 3;
    rgb.values = {0.5f, 0.5f, 0.5f};
    CHECK_THROWS_WITH_AS(pinv_unmix(s, rgb), doctest::Contains("condition"), UnmixError);
}

TEST_CASE("nnls_solve handles small reference systems") {
    // identity system: solution is the clamped rhs
    const double eye[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const double b[3] = {0.7, -0.3, 0.1};
    double x[3];
    REQUIRE(nnls_solve(eye, 3, 3, b, x, 30, 1e-10));
    CHECK(x[0] == doctest::Approx(0.7).epsilon(1e-10));
    CHECK(x[1] == doctest::Approx(0.0));
    CHECK(x[2] == doctest::Approx(0.1).epsilon(1e-10));

    // overdetermined with an interior solution: matches normal equations
    const double a2[6] = {1, 0, 0, 1, 1, 1};  // 3x2
    const double b2[3] = {1.0, 2.0, 3.0};
    double x2[2];
    REQUIRE(nnls_solve(a2, 3, 2, b2, x2, 30, 1e-10));
    CHECK(x2[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(x2[1] == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("five-stain NNLS recovers a pure CD8 pixel") {
    StainMatrix s = normalize_columns(colorectal_panel_initial());
    Image rgb;
    rgb.height = 1; rgb.width = 1; rgb.channels = 3;
    const double conc = 0.7;
    for (int i = 0; i < 3; ++i)
        rgb.values.push_back(static_cast<float>(std::exp(-s.columns[4][i] * conc)));
    NnlsResult r = nnls_unmix(s, rgb);
    REQUIRE(r.converged[0] == 1);
    CHECK(r.residual[0] < 1e-5);
    CHECK(r.concentrations.values[4] == doctest::Approx(conc).epsilon(1e-4));
    for (int k = 0; k < 4; ++k) CHECK(r.concentrations.values[k] < 1e-4);
}

TEST_CASE("NNLS agrees with pinv on interior K=3 solutions") {
    Rng rng(107);
    StainMatrix s = first_k(normalize_columns(colorectal_panel_initial()), 3);
    Image c = random_concentrations(6, 6, 3, rng, 1.0);
    for (auto& v : c.values) v += 0.1f;  // keep solutions strictly positive
    Image rgb = bl_decode(s, c);
    PinvResult pr = pinv_unmix(s, rgb);
    NnlsResult nr = nnls_unmix(s, rgb);
    for (size_t i = 0; i < c.values.size(); ++i)
        CHECK(std::abs(pr.concentrations.values[i] - nr.concentrations.values[i]) < 1e-4);
    for (auto f : nr.converged) CHECK(f == 1);
}

TEST_CASE("NNLS residual reports the unexplained optical density") {
    StainMatrix s;
    s.names = {"r"};
    s.columns = {{1.0, 0.0, 0.0}};
    s.normalized = true;
    Image rgb;
    rgb.height = 1; rgb.width = 1; rgb.channels = 3;
    rgb.values = {static_cast<float>(std::exp(-0.4)), static_cast<float>(std::exp(-0.3)), 1.0f};
    NnlsResult r = nnls_unmix(s, rgb);
    CHECK(r.concentrations.values[0] == doctest::Approx(0.4).epsilon(1e-4));
    CHECK(r.residual[0] == doctest::Approx(0.3).epsilon(1e-3));  // green od unexplained
}
