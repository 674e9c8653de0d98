#include "sora/tensor_io.hpp"

#include "sora/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace sora {
namespace {

constexpr char kMagic[4] = {'S', 'O', 'R', 'A'};
constexpr std::uint8_t kVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    put_u64(out, std::bit_cast<std::uint64_t>(d));
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

} // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename failed for " + path + ": " + ec.message());
}

void write_tensor(const std::string& path, const Tensor& t) {
    std::string buf;
    buf.reserve(6 + 8 * t.rank() + 8 * t.size());
    buf.append(kMagic, 4);
    buf.push_back(static_cast<char>(kVersion));
    buf.push_back(static_cast<char>(t.rank()));
    for (std::size_t e : t.shape()) put_u64(buf, e);
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(buf, t.data()[i]);
    write_file_atomic(path, buf);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tensor file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 6) throw IoError("truncated tensor file: " + path);
    if (!std::equal(kMagic, kMagic + 4, bytes.data())) {
        throw IoError("bad magic in tensor file: " + path);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint8_t version = p[4];
    if (version != kVersion) {
        throw IoError("unsupported tensor format version " + std::to_string(int(version)) +
                      " in " + path);
    }
    const std::size_t rank = p[5];
    std::size_t off = 6;
    if (bytes.size() < off + 8 * rank) throw IoError("truncated tensor header: " + path);
    std::vector<std::size_t> shape(rank);
    for (std::size_t i = 0; i < rank; ++i, off += 8) {
        shape[i] = static_cast<std::size_t>(get_u64(p + off));
    }
    const std::size_t n = shape_product(shape);
    if (bytes.size() != off + 8 * n) {
        throw IoError("tensor payload size mismatch in " + path);
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i, off += 8) {
        data[i] = std::bit_cast<double>(get_u64(p + off));
    }
    return Tensor(std::move(shape), std::move(data));
}

} // namespace sora
