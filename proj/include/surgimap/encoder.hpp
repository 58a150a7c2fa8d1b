#pragma once

#include "surgimap/corpus.hpp"
#include "surgimap/hsaf.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace surgimap {

struct VideoClipShape {
    int frames = 0;
    int channels = 3;
    int height = 0;
    int width = 0;
};

struct CubeShape {
    int frames = 2;
    int height = 14;
    int width = 14;
};

struct CubeCounts {
    int temporal = 0;
    int height = 0;
    int width = 0;
    long total = 0;

    bool operator==(const CubeCounts&) const = default;
};

// Number of cubes along each axis and their product. Throws GeometryError on
// non-positive sizes or inexact division.
CubeCounts cube_count(const VideoClipShape& shape, const CubeShape& cube = {});

using ClipEmbedding = std::vector<float>;

// Arithmetic mean over the rows of a (cubes x dim) matrix.
ClipEmbedding pool_embedding(const FeatureMatrix& cube_embeddings);
ClipEmbedding pool_embedding(std::span<const float> rows, std::size_t dim);

// Read-only source of clip embeddings. The encoder is frozen: repeated
// requests for the same clip return bit-identical vectors.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual ClipEmbedding provide(const ClipRecord& clip) const = 0;
};

// Resolves `clip.feature` against HSAF files under a base directory.
class HsafProvider final : public FeatureProvider {
public:
    explicit HsafProvider(std::filesystem::path base_dir = {});

    ClipEmbedding provide(const ClipRecord& clip) const override;
    const FeatureMatrix& file(const std::string& name) const;

private:
    std::filesystem::path base_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, std::shared_ptr<const FeatureMatrix>> cache_;
};

// Regenerates features from the synthetic world by generator index, which is
// the record's feature index.
class SyntheticProvider final : public FeatureProvider {
public:
    explicit SyntheticProvider(const SyntheticWorld& world, std::uint64_t index_offset = 0)
        : world_(world), offset_(index_offset) {}

    ClipEmbedding provide(const ClipRecord& clip) const override;

private:
    const SyntheticWorld& world_;
    std::uint64_t offset_;
};

} // namespace surgimap
