#include "surgimap/encoder.hpp"

#include "surgimap/errors.hpp"

namespace surgimap {

CubeCounts cube_count(const VideoClipShape& shape, const CubeShape& cube) {
    if (shape.frames <= 0 || shape.channels <= 0 || shape.height <= 0 || shape.width <= 0) {
        throw GeometryError("video shape must be positive");
    }
    if (cube.frames <= 0 || cube.height <= 0 || cube.width <= 0) {
        throw GeometryError("cube shape must be positive");
    }
    auto check = [](int size, int part, const char* axis) {
        if (size % part != 0) {
            throw GeometryError(std::string(axis) + " size " + std::to_string(size) +
                                " is not divisible by cube size " + std::to_string(part));
        }
        return size / part;
    };
    CubeCounts c;
    c.temporal = check(shape.frames, cube.frames, "temporal");
    c.height = check(shape.height, cube.height, "height");
    c.width = check(shape.width, cube.width, "width");
    c.total = static_cast<long>(c.temporal) * c.height * c.width;
    return c;
}

ClipEmbedding pool_embedding(std::span<const float> rows, std::size_t dim) {
    if (dim == 0 || rows.empty() || rows.size() % dim != 0) {
        throw GeometryError("pool_embedding needs at least one row of positive dimension");
    }
    std::size_t n = rows.size() / dim;
    std::vector<double> acc(dim, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t d = 0; d < dim; ++d) {
            acc[d] += rows[r * dim + d];
        }
    }
    ClipEmbedding out(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        out[d] = static_cast<float>(acc[d] / static_cast<double>(n));
    }
    return out;
}

ClipEmbedding pool_embedding(const FeatureMatrix& cube_embeddings) {
    if (cube_embeddings.count == 0) {
        throw GeometryError("pool_embedding needs M >= 1 cube embeddings");
    }
    return pool_embedding(cube_embeddings.values, cube_embeddings.dim);
}

HsafProvider::HsafProvider(std::filesystem::path base_dir) : base_(std::move(base_dir)) {}

const FeatureMatrix& HsafProvider::file(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(name);
    if (it == cache_.end()) {
        std::filesystem::path p(name);
        if (p.is_relative() && !base_.empty()) {
            p = base_ / p;
        }
        auto loaded = std::make_shared<const FeatureMatrix>(read_hsaf(p));
        it = cache_.emplace(name, std::move(loaded)).first;
    }
    return *it->second;
}

ClipEmbedding HsafProvider::provide(const ClipRecord& clip) const {
    const auto& m = file(clip.feature.file);
    auto row = m.row(clip.feature.index);
    return {row.begin(), row.end()};
}

ClipEmbedding SyntheticProvider::provide(const ClipRecord& clip) const {
    return world_.feature(clip.annotation, offset_ + clip.feature.index);
}

} // namespace surgimap
