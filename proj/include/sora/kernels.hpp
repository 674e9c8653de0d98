#pragma once

#include <cstddef>

namespace sora::kernels {

enum class Backend { scalar = 0, avx2 = 1, neon = 2 };

// Hot inner-loop primitives shared by the tensor and autodiff layers. Each
// entry has a scalar reference implementation; SIMD variants are picked at
// runtime when the CPU supports them. add/sub/mul/scale are bit-identical
// across backends (one rounding per lane); dot/sum reorder the accumulation
// and axpy fuses multiply-add, so those are compared within a tight relative
// tolerance instead. Within one process the selected backend is fixed, which
// keeps runs bit-reproducible.
struct KernelTable {
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    void (*axpy)(double* dst, const double* x, double s, std::size_t n); // dst += s*x
    void (*add)(double* dst, const double* a, const double* b, std::size_t n);
    void (*sub)(double* dst, const double* a, const double* b, std::size_t n);
    void (*mul)(double* dst, const double* a, const double* b, std::size_t n);
    void (*scale)(double* dst, const double* a, double s, std::size_t n);
};

const KernelTable& scalar_table();
// null when the binary or the CPU lacks the instruction set
const KernelTable* avx2_table();
const KernelTable* neon_table();

Backend active_backend();
const char* backend_name(Backend b);
bool backend_supported(Backend b);

// Test hook: pin a specific backend (throws ConfigError if unsupported).
void force_backend(Backend b);
// Back to automatic selection (SORA_KERNELS env var, else best supported).
void reset_backend();

const KernelTable& table();

inline double dot(const double* a, const double* b, std::size_t n) { return table().dot(a, b, n); }
inline double sum(const double* a, std::size_t n) { return table().sum(a, n); }
inline void axpy(double* dst, const double* x, double s, std::size_t n) { table().axpy(dst, x, s, n); }
inline void add(double* dst, const double* a, const double* b, std::size_t n) { table().add(dst, a, b, n); }
inline void sub(double* dst, const double* a, const double* b, std::size_t n) { table().sub(dst, a, b, n); }
inline void mul(double* dst, const double* a, const double* b, std::size_t n) { table().mul(dst, a, b, n); }
inline void scale(double* dst, const double* a, double s, std::size_t n) { table().scale(dst, a, s, n); }

} // namespace sora::kernels
