#include "surgimap/errors.hpp"
#include "surgimap/fsutil.hpp"
#include "surgimap/model.hpp"

#include <bit>
#include <cstring>

namespace surgimap {

namespace {

constexpr std::string_view kMagic = "SMCKPT 1\n";

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

void put_f32(std::string& out, float f) {
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::string_view line() {
        auto end = bytes_.find('\n', pos_);
        if (end == std::string_view::npos) {
            throw FormatError("checkpoint: truncated header");
        }
        auto s = bytes_.substr(pos_, end - pos_);
        pos_ = end + 1;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError("checkpoint: truncated data");
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(const Model& model) {
    std::string out(kMagic);
    out += model.config().to_json().dump();
    out.push_back('\n');
    std::uint32_t count = 0;
    model.params().for_each([&](const std::string&, const Matrix<float>&) { ++count; });
    put_u32(out, count);
    model.params().for_each([&](const std::string& name, const Matrix<float>& m) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(m.rows()));
        put_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            put_f32(out, m.data()[i]);
        }
    });
    return out;
}

Model decode_checkpoint(std::string_view bytes) {
    if (bytes.substr(0, kMagic.size()) != kMagic) {
        throw FormatError("not a checkpoint: bad magic (expected \"SMCKPT 1\")");
    }
    Reader in(bytes.substr(kMagic.size()));
    ModelConfig config;
    try {
        config = ModelConfig::from_json(nlohmann::json::parse(in.line()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad config line: ") + e.what());
    } catch (const ValidationError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    Model model(config, 0);
    std::uint32_t expected = 0;
    model.params().for_each([&](const std::string&, Matrix<float>&) { ++expected; });
    std::uint32_t count = in.u32();
    if (count != expected) {
        throw FormatError("checkpoint: expected " + std::to_string(expected) + " tensors, found " +
                          std::to_string(count));
    }
    model.params().for_each([&](const std::string& name, Matrix<float>& m) {
        std::uint32_t len = in.u32();
        std::string_view got = in.take(len);
        if (got != name) {
            throw FormatError("checkpoint: expected tensor '" + name + "', found '" + std::string(got) + "'");
        }
        std::uint32_t rows = in.u32();
        std::uint32_t cols = in.u32();
        if (rows != m.rows() || cols != m.cols()) {
            throw FormatError("checkpoint: tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", config implies " + std::to_string(m.rows()) +
                              "x" + std::to_string(m.cols()));
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = in.f32();
        }
    });
    if (!in.done()) {
        throw FormatError("checkpoint: trailing bytes after last tensor");
    }
    return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const IoError&) {
        throw IoError("cannot read checkpoint " + path.string());
    }
    return decode_checkpoint(bytes);
}

} // namespace surgimap
