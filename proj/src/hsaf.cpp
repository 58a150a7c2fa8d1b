#include "surgimap/hsaf.hpp"

#include "surgimap/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace surgimap {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
    }
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    }
    return static_cast<T>(v);
}

} // namespace

std::span<const float> FeatureMatrix::row(std::size_t i) const {
    if (i >= count) {
        throw NotFoundError("feature row " + std::to_string(i) + " out of range (count " +
                            std::to_string(count) + ")");
    }
    return {values.data() + i * dim, dim};
}

std::span<float> FeatureMatrix::row(std::size_t i) {
    if (i >= count) {
        throw NotFoundError("feature row " + std::to_string(i) + " out of range (count " +
                            std::to_string(count) + ")");
    }
    return {values.data() + i * dim, dim};
}

void FeatureMatrix::append(std::span<const float> r) {
    if (count == 0 && dim == 0) {
        dim = static_cast<std::uint32_t>(r.size());
    }
    if (r.size() != dim) {
        throw ValidationError("feature row has dim " + std::to_string(r.size()) + ", expected " +
                              std::to_string(dim));
    }
    values.insert(values.end(), r.begin(), r.end());
    ++count;
}

std::string encode_hsaf(const FeatureMatrix& m) {
    if (m.values.size() != static_cast<std::size_t>(m.count) * m.dim) {
        throw ValidationError("HSAF: value count does not match count*dim");
    }
    std::string out;
    out.reserve(kHsafHeaderBytes + m.values.size() * 4);
    out += "HSAF";
    put_le<std::uint16_t>(out, kHsafVersion);
    put_le<std::uint32_t>(out, m.count);
    put_le<std::uint32_t>(out, m.dim);
    for (float f : m.values) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

FeatureMatrix decode_hsaf(std::string_view bytes) {
    if (bytes.size() < kHsafHeaderBytes || bytes.substr(0, 4) != "HSAF") {
        throw FormatError("not an HSAF file: bad magic (expected \"HSAF\")");
    }
    auto version = get_le<std::uint16_t>(bytes, 4);
    if (version != kHsafVersion) {
        throw FormatError("HSAF: unsupported version " + std::to_string(version));
    }
    FeatureMatrix m;
    m.count = get_le<std::uint32_t>(bytes, 6);
    m.dim = get_le<std::uint32_t>(bytes, 10);
    auto n = static_cast<std::uint64_t>(m.count) * m.dim;
    if (bytes.size() != kHsafHeaderBytes + n * 4) {
        throw FormatError("HSAF: payload size " + std::to_string(bytes.size() - kHsafHeaderBytes) +
                          " does not match count*dim*4 = " + std::to_string(n * 4));
    }
    m.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        m.values[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, kHsafHeaderBytes + i * 4));
    }
    return m;
}

void write_hsaf(const std::filesystem::path& path, const FeatureMatrix& matrix) {
    auto bytes = encode_hsaf(matrix);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

FeatureMatrix read_hsaf(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open feature file " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return decode_hsaf(buffer.str());
}

} // namespace surgimap
