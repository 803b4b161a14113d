#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "pivoflow/kernels.hpp"
#include "pivoflow/rng.hpp"

using namespace pivoflow;

namespace {

std::vector<double> random_vec(std::size_t n, CounterStream& s, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = s.next_uniform(-scale, scale);
    return v;
}

bool close_rel(double a, double b, double rel, double abs_tol = 1e-14) {
    return std::abs(a - b) <= abs_tol + rel * std::max(std::abs(a), std::abs(b));
}

}  // namespace

TEST_CASE("scalar kernels: reference semantics") {
    const auto& K = kernels::scalar_kernels();
    const double a[3] = {1.0, 2.0, 3.0};
    const double b[3] = {4.0, -5.0, 6.0};
    CHECK(K.dot(a, b, 3) == doctest::Approx(1 * 4 - 2 * 5 + 3 * 6));

    double y[3] = {1.0, 1.0, 1.0};
    K.axpy(2.0, a, y, 3);
    CHECK(y[0] == 3.0);
    CHECK(y[2] == 7.0);

    // 2x3 matvec with bias
    const double w[6] = {1, 0, 0, 0, 1, 0};
    const double bias[2] = {10, 20};
    double out[2];
    K.matvec_bias(w, a, bias, out, 2, 3);
    CHECK(out[0] == 11.0);
    CHECK(out[1] == 22.0);
    K.matvec_bias(w, a, nullptr, out, 2, 3);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 2.0);
}

TEST_CASE("simd variant matches scalar reference on random instances") {
    const kernels::Kernels* avx2 = kernels::avx2_kernels();
    if (!avx2) {
        MESSAGE("avx2 unavailable on this host; dispatch falls back to scalar");
        CHECK(std::string(kernels::active().name) == "scalar");
        return;
    }
    const auto& S = kernels::scalar_kernels();
    CounterStream stream(2024, 0);

    // Odd lengths exercise the vector tails.
    for (std::size_t n : {1u, 3u, 4u, 7u, 8u, 13u, 64u, 65u, 200u}) {
        const auto a = random_vec(n, stream);
        const auto b = random_vec(n, stream);
        CHECK(close_rel(S.dot(a.data(), b.data(), n), avx2->dot(a.data(), b.data(), n), 1e-13));

        auto y1 = random_vec(n, stream);
        auto y2 = y1;
        S.axpy(0.37, a.data(), y1.data(), n);
        avx2->axpy(0.37, a.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i) CHECK(close_rel(y1[i], y2[i], 1e-13));

        auto out1 = std::vector<double>(n), out2 = std::vector<double>(n);
        S.mul(a.data(), b.data(), out1.data(), n);
        avx2->mul(a.data(), b.data(), out2.data(), n);
        for (std::size_t i = 0; i < n; ++i) CHECK(out1[i] == out2[i]);
    }

    for (std::size_t m : {1u, 2u, 5u, 64u}) {
        for (std::size_t n : {1u, 3u, 13u, 64u, 65u}) {
            const auto w = random_vec(m * n, stream);
            const auto x = random_vec(n, stream);
            const auto bias = random_vec(m, stream);
            std::vector<double> y1(m), y2(m);
            S.matvec_bias(w.data(), x.data(), bias.data(), y1.data(), m, n);
            avx2->matvec_bias(w.data(), x.data(), bias.data(), y2.data(), m, n);
            for (std::size_t i = 0; i < m; ++i) CHECK(close_rel(y1[i], y2[i], 1e-12));
        }
    }

    // AdamW elementwise update.
    const std::size_t n = 67;
    auto p1 = random_vec(n, stream), p2 = p1;
    auto g = random_vec(n, stream);
    auto m1 = random_vec(n, stream, 0.1), m2 = m1;
    std::vector<double> v1(n, 0.5), v2(n, 0.5);
    S.adamw_update(p1.data(), g.data(), m1.data(), v1.data(), n, 0.01, 0.9, 0.999, 1e-8, 0.01,
                   0.1, 0.001);
    avx2->adamw_update(p2.data(), g.data(), m2.data(), v2.data(), n, 0.01, 0.9, 0.999, 1e-8, 0.01,
                       0.1, 0.001);
    for (std::size_t i = 0; i < n; ++i) {
        CHECK(close_rel(p1[i], p2[i], 1e-12));
        CHECK(close_rel(m1[i], m2[i], 1e-13));
        CHECK(close_rel(v1[i], v2[i], 1e-13));
    }
}

TEST_CASE("dispatch selects a table and is stable") {
    const auto& a = kernels::active();
    const auto& b = kernels::active();
    CHECK(&a == &b);
    CHECK((std::string(a.name) == "avx2" || std::string(a.name) == "scalar"));
}
