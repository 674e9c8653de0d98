#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sora/kernels.hpp"
#include "sora/rng.hpp"

#include <cmath>
#include <vector>

using namespace sora;
namespace k = sora::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

// Sizes straddle the vector width so tails of every length are exercised.
const std::size_t kSizes[] = {1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 64, 100, 257};

} // namespace

TEST_CASE("scalar reference kernels compute the textbook results") {
    const double a[] = {1.0, 2.0, 3.0, 4.0};
    const double b[] = {0.5, -1.0, 2.0, 0.25};
    const auto& t = k::scalar_table();
    CHECK(t.dot(a, b, 4) == doctest::Approx(0.5 - 2.0 + 6.0 + 1.0).epsilon(1e-15));
    CHECK(t.sum(a, 4) == 10.0);

    double dst[4] = {1.0, 1.0, 1.0, 1.0};
    t.axpy(dst, a, 2.0, 4);
    CHECK(dst[0] == 3.0);
    CHECK(dst[3] == 9.0);

    double out[4];
    t.add(out, a, b, 4);
    CHECK(out[1] == 1.0);
    t.sub(out, a, b, 4);
    CHECK(out[1] == 3.0);
    t.mul(out, a, b, 4);
    CHECK(out[2] == 6.0);
    t.scale(out, a, -1.5, 4);
    CHECK(out[0] == -1.5);
}

TEST_CASE("SIMD backends agree with the scalar reference") {
    const k::Backend simd_candidates[] = {k::Backend::avx2, k::Backend::neon};
    const auto& ref = k::scalar_table();
    bool any_simd = false;

    for (k::Backend b : simd_candidates) {
        if (!k::backend_supported(b)) continue;
        any_simd = true;
        const k::KernelTable* kt = b == k::Backend::avx2 ? k::avx2_table() : k::neon_table();
        REQUIRE(kt != nullptr);
        INFO("backend ", k::backend_name(b));

        Rng rng(7);
        for (std::size_t n : kSizes) {
            auto x = random_vec(rng, n);
            auto y = random_vec(rng, n);

            // reductions and fused multiply-adds: tight relative tolerance
            const double dr = ref.dot(x.data(), y.data(), n);
            const double ds = kt->dot(x.data(), y.data(), n);
            CHECK(std::abs(dr - ds) <= 1e-12 * std::max(1.0, std::abs(dr)));

            const double sr = ref.sum(x.data(), n);
            const double ss = kt->sum(x.data(), n);
            CHECK(std::abs(sr - ss) <= 1e-12 * std::max(1.0, std::abs(sr)));

            std::vector<double> d1(n, 0.25), d2(n, 0.25);
            ref.axpy(d1.data(), x.data(), 1.75, n);
            kt->axpy(d2.data(), x.data(), 1.75, n);
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::abs(d1[i] - d2[i]) <= 1e-14 * std::max(1.0, std::abs(d1[i])));
            }

            // pure elementwise kernels must be bit-identical
            std::vector<double> r1(n), r2(n);
            ref.add(r1.data(), x.data(), y.data(), n);
            kt->add(r2.data(), x.data(), y.data(), n);
            CHECK(r1 == r2);
            ref.sub(r1.data(), x.data(), y.data(), n);
            kt->sub(r2.data(), x.data(), y.data(), n);
            CHECK(r1 == r2);
            ref.mul(r1.data(), x.data(), y.data(), n);
            kt->mul(r2.data(), x.data(), y.data(), n);
            CHECK(r1 == r2);
            ref.scale(r1.data(), x.data(), 0.731, n);
            kt->scale(r2.data(), x.data(), 0.731, n);
            CHECK(r1 == r2);
        }
    }

#if defined(__x86_64__) || defined(__aarch64__)
    // every machine this project targets has at least one SIMD backend
    CHECK(any_simd);
#else
    (void)any_simd;
#endif
}

TEST_CASE("force_backend pins the dispatch and reset restores it") {
    const k::Backend before = k::active_backend();
    k::force_backend(k::Backend::scalar);
    CHECK(k::active_backend() == k::Backend::scalar);
    const double a[] = {1.0, 2.0};
    CHECK(k::dot(a, a, 2) == 5.0);
    k::reset_backend();
    CHECK(k::active_backend() == before);
}

TEST_CASE("dispatch is deterministic within a process") {
    const k::Backend b1 = k::active_backend();
    Rng rng(3);
    auto x = random_vec(rng, 33);
    auto y = random_vec(rng, 33);
    const double first = k::dot(x.data(), y.data(), 33);
    for (int rep = 0; rep < 5; ++rep) {
        CHECK(k::dot(x.data(), y.data(), 33) == first);
    }
    CHECK(k::active_backend() == b1);
}
