#include "pivoflow/kernels.hpp"

#include <cmath>

namespace pivoflow::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void add_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void matvec_bias_scalar(const double* w, const double* x, const double* b,
                        double* y, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = w + i * n;
        double s = b ? b[i] : 0.0;
        for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
        y[i] = s;
    }
}

void adamw_scalar(double* p, const double* g, double* m, double* v,
                  std::size_t n, double lr, double beta1, double beta2,
                  double eps, double wd, double bc1, double bc2) {
    const double decay = 1.0 - lr * wd;
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] = p[i] * decay - lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

const Kernels& scalar_kernels() {
    static const Kernels k = {
        "scalar",     dot_scalar, axpy_scalar,        scale_scalar, add_scalar,
        sub_scalar,   mul_scalar, matvec_bias_scalar, adamw_scalar,
    };
    return k;
}

}  // namespace pivoflow::kernels
