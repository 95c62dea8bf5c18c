#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gpl {

// On-disk matrix: 4 magic bytes "GPLT", then version, rows, cols as
// little-endian uint32, then rows*cols little-endian float32 in row-major order.
inline constexpr char kTensorMagic[4] = {'G', 'P', 'L', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

struct Matrix {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<double> data;  // row-major

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

void write_tensor(const std::string& path, const Matrix& m);
Matrix read_tensor(const std::string& path);

// Byte content of a file, or throws MissingArtifact-agnostic Error when unreadable.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);
std::uint64_t file_hash(const std::string& path);

}  // namespace gpl
