#include "sora/kernels.hpp"

// NEON variants, 2 doubles per vector. NEON is baseline on aarch64, so no
// runtime probe is needed beyond the architecture itself.

#if defined(__aarch64__)

#include <arm_neon.h>

namespace sora::kernels {
namespace {

double dot_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    for (; i + 2 <= n; i += 2) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    }
    double acc = vaddvq_f64(acc0) + vaddvq_f64(acc1);
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double sum_neon(const double* a, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc0 = vaddq_f64(acc0, vld1q_f64(a + i));
    double acc = vaddvq_f64(acc0);
    for (; i < n; ++i) acc += a[i];
    return acc;
}

void axpy_neon(double* dst, const double* x, double s, std::size_t n) {
    const float64x2_t vs = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t d = vld1q_f64(dst + i);
        d = vfmaq_f64(d, vs, vld1q_f64(x + i));
        vst1q_f64(dst + i, d);
    }
    for (; i < n; ++i) dst[i] += s * x[i];
}

void add_neon(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_neon(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_neon(double* dst, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_neon(double* dst, const double* a, double s, std::size_t n) {
    const float64x2_t vs = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(dst + i, vmulq_f64(vs, vld1q_f64(a + i)));
    for (; i < n; ++i) dst[i] = s * a[i];
}

} // namespace

const KernelTable* neon_table() {
    static const KernelTable t = {
        dot_neon, sum_neon, axpy_neon,
        add_neon, sub_neon, mul_neon, scale_neon,
    };
    return &t;
}

} // namespace sora::kernels

#else

namespace sora::kernels {

const KernelTable* neon_table() { return nullptr; }

} // namespace sora::kernels

#endif
