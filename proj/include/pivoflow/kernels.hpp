#pragma once
// Data-parallel f64 inner loops used by the network substrate and the
// optimizer. A scalar reference implementation and an AVX2 variant share one
// function table; the variant is selected once at startup (see active()).
// SIMD results may differ from scalar in the last bits (reassociated sums,
// FMA contraction) — equivalence tests bound the relative error.

#include <cstddef>

namespace pivoflow::kernels {

struct Kernels {
    const char* name;

    // sum_i a[i]*b[i]
    double (*dot)(const double* a, const double* b, std::size_t n);
    // y[i] += alpha * x[i]
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // x[i] *= alpha
    void (*scale)(double alpha, double* x, std::size_t n);
    // out[i] = a[i] + b[i]
    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    // out[i] = a[i] - b[i]
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    // out[i] = a[i] * b[i]
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    // y = W x + b with W row-major [m x n]; b may be null for y = W x.
    void (*matvec_bias)(const double* w, const double* x, const double* b,
                        double* y, std::size_t m, std::size_t n);
    // Decoupled-weight-decay Adam step on one tensor. bc1/bc2 are the bias
    // corrections (1 - beta^t) for the current step.
    void (*adamw_update)(double* p, const double* g, double* m, double* v,
                         std::size_t n, double lr, double beta1, double beta2,
                         double eps, double wd, double bc1, double bc2);
};

const Kernels& scalar_kernels();

// AVX2+FMA table, or nullptr when unsupported by the build or the CPU.
const Kernels* avx2_kernels();

// Table used by the rest of the library. Picks AVX2 when the CPU has it;
// PIVOFLOW_SIMD=scalar|avx2 in the environment overrides the choice.
const Kernels& active();

}  // namespace pivoflow::kernels
