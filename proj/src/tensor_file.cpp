#include "gpl/tensor_file.hpp"

#include "gpl/common.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gpl {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
    std::uint32_t v = 0;
    std::memcpy(&v, in.data() + off, 4);
    return v;
}

}  // namespace

void write_tensor(const std::string& path, const Matrix& m) {
    if (m.data.size() != static_cast<std::size_t>(m.rows) * m.cols) {
        throw InvalidArgument("tensor shape does not match data size for '" + path + "'");
    }
    std::string out;
    out.reserve(16 + m.data.size() * 4);
    out.append(kTensorMagic, 4);
    put_u32(out, kTensorVersion);
    put_u32(out, m.rows);
    put_u32(out, m.cols);
    for (double d : m.data) {
        const float f = static_cast<float>(d);
        char b[4];
        std::memcpy(b, &f, 4);
        out.append(b, 4);
    }
    write_file(path, out);
}

Matrix read_tensor(const std::string& path) {
    const std::string in = read_file(path);
    if (in.size() < 16 || std::memcmp(in.data(), kTensorMagic, 4) != 0) {
        throw Error("'" + path + "' is not a tensor file");
    }
    if (get_u32(in, 4) != kTensorVersion) {
        throw Error("'" + path + "': unsupported tensor version");
    }
    Matrix m;
    m.rows = get_u32(in, 8);
    m.cols = get_u32(in, 12);
    const std::size_t n = static_cast<std::size_t>(m.rows) * m.cols;
    if (in.size() != 16 + n * 4) {
        throw Error("'" + path + "': truncated tensor data");
    }
    m.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        float f = 0;
        std::memcpy(&f, in.data() + 16 + i * 4, 4);
        m.data[i] = f;
    }
    return m;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write '" + path + "'");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("short write to '" + path + "'");
    }
}

std::uint64_t file_hash(const std::string& path) { return fnv1a64(read_file(path)); }

}  // namespace gpl
