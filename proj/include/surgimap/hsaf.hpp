#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace surgimap {

// Row-major float matrix, the in-memory form of an HSAF feature file.
//
// On disk: "HSAF", u16 version (=1), u32 count, u32 dim, then count*dim
// IEEE-754 binary32 values, all little-endian.
struct FeatureMatrix {
    std::uint32_t count = 0;
    std::uint32_t dim = 0;
    std::vector<float> values;

    FeatureMatrix() = default;
    FeatureMatrix(std::uint32_t rows, std::uint32_t cols)
        : count(rows), dim(cols), values(static_cast<std::size_t>(rows) * cols, 0.0f) {}

    std::span<const float> row(std::size_t i) const;
    std::span<float> row(std::size_t i);
    void append(std::span<const float> row);

    bool operator==(const FeatureMatrix&) const = default;
};

inline constexpr std::uint16_t kHsafVersion = 1;
inline constexpr std::size_t kHsafHeaderBytes = 14;

std::string encode_hsaf(const FeatureMatrix& matrix);
FeatureMatrix decode_hsaf(std::string_view bytes);

void write_hsaf(const std::filesystem::path& path, const FeatureMatrix& matrix);
FeatureMatrix read_hsaf(const std::filesystem::path& path);

} // namespace surgimap
