#include "pivoflow/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace pivoflow::kernels {

const Kernels* avx2_table_internal();  // defined in kernels_avx2.cpp

const Kernels* avx2_kernels() {
#if defined(__x86_64__) || defined(_M_X64)
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        return avx2_table_internal();
#endif
    return nullptr;
}

namespace {

const Kernels& select() {
    const char* env = std::getenv("PIVOFLOW_SIMD");
    if (env && std::strcmp(env, "scalar") == 0) return scalar_kernels();
    const Kernels* avx2 = avx2_kernels();
    if (env && std::strcmp(env, "avx2") == 0 && avx2) return *avx2;
    return avx2 ? *avx2 : scalar_kernels();
}

}  // namespace

const Kernels& active() {
    static const Kernels& chosen = select();
    return chosen;
}

}  // namespace pivoflow::kernels
