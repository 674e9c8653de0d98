#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sora/errors.hpp"
#include "sora/rng.hpp"
#include "sora/tensor.hpp"
#include "sora/tensor_io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace sora;

namespace {

std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "sora_tensor_test";
    std::filesystem::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("shape and element count stay consistent") {
    Tensor t({2, 3});
    CHECK(t.rank() == 2);
    CHECK(t.size() == 6);
    t(1, 2) = 5.0;
    CHECK(t[5] == 5.0);

    Tensor s = Tensor::scalar(3.5);
    CHECK(s.rank() == 0);
    CHECK(s.size() == 1);
    CHECK(s.value() == 3.5);

    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 2}), DimensionError);
}

TEST_CASE("rank-3 indexing is row-major") {
    Tensor t({2, 3, 4});
    t(1, 2, 3) = 9.0;
    CHECK(t[1 * 12 + 2 * 4 + 3] == 9.0);
}

TEST_CASE("finiteness guard") {
    Tensor t({3});
    CHECK(t.all_finite());
    t[1] = std::numeric_limits<double>::infinity();
    CHECK(!t.all_finite());
    CHECK_THROWS_AS(ensure_finite(t, "unit"), NumericError);
}

TEST_CASE("tensor file round trip is bit exact") {
    Rng rng(11);
    Tensor t({3, 5, 2});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 1e3;
    // throw in values with tricky binary forms
    t[0] = 0.1;
    t[1] = -0.0;
    t[2] = 1e-308;
    t[3] = 12345678.987654321;

    const auto path = (tmp_dir() / "roundtrip.ten").string();
    write_tensor(path, t);
    Tensor r = read_tensor(path);
    REQUIRE(r.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(std::memcmp(&r[i], &t[i], sizeof(double)) == 0);
    }

    // scalar round trip
    const auto spath = (tmp_dir() / "scalar.ten").string();
    write_tensor(spath, Tensor::scalar(-0.25));
    CHECK(read_tensor(spath).value() == -0.25);
}

TEST_CASE("reader rejects corrupt containers") {
    const auto dir = tmp_dir();

    const auto good = (dir / "good.ten").string();
    write_tensor(good, Tensor::full({4}, 1.5));

    SUBCASE("bad magic") {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        bytes[0] = 'X';
        const auto bad = (dir / "bad_magic.ten").string();
        std::ofstream(bad, std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_tensor(bad), IoError);
    }
    SUBCASE("unsupported version") {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        bytes[4] = 2;
        const auto bad = (dir / "bad_version.ten").string();
        std::ofstream(bad, std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_tensor(bad), IoError);
    }
    SUBCASE("truncated payload") {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() - 5);
        const auto bad = (dir / "truncated.ten").string();
        std::ofstream(bad, std::ios::binary) << bytes;
        CHECK_THROWS_AS(read_tensor(bad), IoError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_tensor((dir / "nope.ten").string()), IoError);
    }
}

TEST_CASE("writes are atomic: no temp residue, same bytes on rewrite") {
    const auto dir = tmp_dir();
    const auto path = (dir / "atomic.ten").string();
    Tensor t({8});
    Rng rng(5);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
    write_tensor(path, t);
    CHECK(!std::filesystem::exists(path + ".tmp"));

    std::ifstream in1(path, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(in1)), std::istreambuf_iterator<char>());
    write_tensor(path, t);
    std::ifstream in2(path, std::ios::binary);
    std::string b2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("rng streams are reproducible and independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng s0(42, 0), s1(42, 1);
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ |= s0.next_u64() != s1.next_u64();
    CHECK(differ);

    // uniform stays in [0,1), normal matches its moments roughly
    Rng r(9);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double z = r.normal();
        mean += z;
        var += z * z;
    }
    mean /= n;
    var = var / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}
