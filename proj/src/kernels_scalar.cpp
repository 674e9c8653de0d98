#include "sora/kernels.hpp"

// Reference kernels. Plain loops, one accumulator, no reordering: these
// define the semantics the SIMD variants are tested against.

namespace sora::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double sum_scalar(const double* a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

void axpy_scalar(double* dst, const double* x, double s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += s * x[i];
}

void add_scalar(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_scalar(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_scalar(double* dst, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_scalar(double* dst, const double* a, double s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = s * a[i];
}

} // namespace

const KernelTable& scalar_table() {
    static const KernelTable t = {
        dot_scalar, sum_scalar, axpy_scalar,
        add_scalar, sub_scalar, mul_scalar, scale_scalar,
    };
    return t;
}

} // namespace sora::kernels
