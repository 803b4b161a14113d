// AVX2+FMA kernel variants. Compiled with -mavx2 -mfma on x86-64 builds only;
// the dispatcher checks CPU support before handing out this table.

#include "pivoflow/kernels.hpp"

#if defined(PIVOFLOW_BUILD_AVX2)

#include <immintrin.h>

#include <cmath>

namespace pivoflow::kernels {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, double* x, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void matvec_bias_avx2(const double* w, const double* x, const double* b,
                      double* y, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = w + i * n;
        __m256d acc0 = _mm256_setzero_pd();
        __m256d acc1 = _mm256_setzero_pd();
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(row + j), _mm256_loadu_pd(x + j), acc0);
            acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(row + j + 4), _mm256_loadu_pd(x + j + 4), acc1);
        }
        for (; j + 4 <= n; j += 4)
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(row + j), _mm256_loadu_pd(x + j), acc0);
        double s = hsum(_mm256_add_pd(acc0, acc1));
        for (; j < n; ++j) s += row[j] * x[j];
        y[i] = (b ? b[i] : 0.0) + s;
    }
}

void adamw_avx2(double* p, const double* g, double* m, double* v,
                std::size_t n, double lr, double beta1, double beta2,
                double eps, double wd, double bc1, double bc2) {
    const __m256d vb1 = _mm256_set1_pd(beta1);
    const __m256d vb1c = _mm256_set1_pd(1.0 - beta1);
    const __m256d vb2 = _mm256_set1_pd(beta2);
    const __m256d vb2c = _mm256_set1_pd(1.0 - beta2);
    const __m256d vbc1 = _mm256_set1_pd(bc1);
    const __m256d vbc2 = _mm256_set1_pd(bc2);
    const __m256d veps = _mm256_set1_pd(eps);
    const __m256d vlr = _mm256_set1_pd(lr);
    const __m256d vdecay = _mm256_set1_pd(1.0 - lr * wd);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vg = _mm256_loadu_pd(g + i);
        __m256d vm = _mm256_fmadd_pd(vb1, _mm256_loadu_pd(m + i), _mm256_mul_pd(vb1c, vg));
        __m256d vv = _mm256_fmadd_pd(vb2, _mm256_loadu_pd(v + i),
                                     _mm256_mul_pd(vb2c, _mm256_mul_pd(vg, vg)));
        _mm256_storeu_pd(m + i, vm);
        _mm256_storeu_pd(v + i, vv);
        __m256d mhat = _mm256_div_pd(vm, vbc1);
        __m256d vhat = _mm256_div_pd(vv, vbc2);
        __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), veps);
        __m256d upd = _mm256_div_pd(_mm256_mul_pd(vlr, mhat), denom);
        __m256d vp = _mm256_mul_pd(_mm256_loadu_pd(p + i), vdecay);
        _mm256_storeu_pd(p + i, _mm256_sub_pd(vp, upd));
    }
    const double decay = 1.0 - lr * wd;
    for (; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] = p[i] * decay - lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
}

}  // namespace

const Kernels* avx2_table_internal() {
    static const Kernels k = {
        "avx2",   dot_avx2, axpy_avx2,        scale_avx2, add_avx2,
        sub_avx2, mul_avx2, matvec_bias_avx2, adamw_avx2,
    };
    return &k;
}

}  // namespace pivoflow::kernels

#else

namespace pivoflow::kernels {
const Kernels* avx2_table_internal() { return nullptr; }
}  // namespace pivoflow::kernels

#endif
