#include "doctest.h"

#include "model_fixtures.hpp"
#include "surgimap/errors.hpp"
#include "test_util.hpp"

using namespace surgimap;

TEST_CASE("checkpoint round-trip is exact") {
    surgimap::testing::TempDir dir;
    auto c = surgimap::testing::tiny_config(24);
    Model model(c, 5);
    save_checkpoint(model, dir / "m.ckpt");
    auto back = load_checkpoint(dir / "m.ckpt");
    CHECK(back.config() == c);
    std::vector<Matrix<float>> want;
    model.params().for_each([&](const std::string&, const Matrix<float>& m) { want.push_back(m); });
    std::size_t i = 0;
    back.params().for_each([&](const std::string&, const Matrix<float>& m) { CHECK(m == want[i++]); });
    CHECK(encode_checkpoint(back) == encode_checkpoint(model));
}

TEST_CASE("checkpoint validation") {
    auto c = surgimap::testing::tiny_config();
    Model model(c, 6);
    auto bytes = encode_checkpoint(model);
    CHECK(bytes.rfind("SMCKPT 1\n", 0) == 0);
    CHECK_THROWS_AS(decode_checkpoint("SMCKPT 2\n{}"), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), FormatError);

    // A config promising a larger model than the tensors provide.
    auto header_end = bytes.find('\n', 9);
    auto cfg = nlohmann::json::parse(bytes.substr(9, header_end - 9));
    cfg["dim"] = 32;
    auto tampered = std::string("SMCKPT 1\n") + cfg.dump() + bytes.substr(header_end);
    CHECK_THROWS_AS(decode_checkpoint(tampered), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/m.ckpt"), IoError);
}
