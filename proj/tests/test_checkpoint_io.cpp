#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nncomp/checkpoint_io.hpp"
#include "toys.hpp"

using namespace nncomp;
using namespace nncomp::testutil;

namespace {

struct TmpFile {
    std::string path;
    explicit TmpFile(const std::string& name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TmpFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("roundtrip is bit-exact for doubles and floats") {
    Rng rng(90);
    auto ck = init_checkpoint<double>(toy_config(4, 16, 24), rng);
    ck.config.rms_denom = 32;  // make sure optional fields survive
    TmpFile tf("nncomp_rt.nnc");
    save_checkpoint(ck, tf.path);
    auto back = load_checkpoint<double>(tf.path);
    CHECK(back.config.pattern.str() == ck.config.pattern.str());
    CHECK(back.config.rms_denom == 32);
    CHECK(back.config.d_model == ck.config.d_model);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        const auto& u = back.at(name);
        REQUIRE(t.shape == u.shape);
        bool same = true;
        for (int64_t i = 0; i < t.size(); ++i) same = same && t[i] == u[i];
        CHECK(same);
    }
    back.validate();

    Rng rng2(91);
    auto f32 = init_checkpoint<float>(toy_config(2, 8, 8), rng2);
    TmpFile tf2("nncomp_rt32.nnc");
    save_checkpoint(f32, tf2.path);
    auto back32 = load_checkpoint<float>(tf2.path);
    for (const auto& [name, t] : f32.tensors)
        for (int64_t i = 0; i < t.size(); ++i) CHECK(t[i] == back32.at(name)[i]);
}

TEST_CASE("dtype mismatch between file and loader is rejected") {
    Rng rng(92);
    auto ck = init_checkpoint<float>(toy_config(2, 8, 8), rng);
    TmpFile tf("nncomp_dtype.nnc");
    save_checkpoint(ck, tf.path);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(tf.path), doctest::Contains("dtype"), std::runtime_error);
}

TEST_CASE("bad magic is rejected") {
    TmpFile tf("nncomp_magic.nnc");
    {
        std::ofstream f(tf.path, std::ios::binary);
        f.write("XXXX\0\0\0\0", 8);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(tf.path), doctest::Contains("bad magic"), std::runtime_error);
}

TEST_CASE("truncated payload is rejected") {
    Rng rng(93);
    auto ck = init_checkpoint<double>(toy_config(2, 8, 8), rng);
    TmpFile tf("nncomp_trunc.nnc");
    save_checkpoint(ck, tf.path);
    auto size = std::filesystem::file_size(tf.path);
    std::filesystem::resize_file(tf.path, size - 16);
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(tf.path), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("trailing garbage is rejected") {
    Rng rng(94);
    auto ck = init_checkpoint<double>(toy_config(2, 8, 8), rng);
    TmpFile tf("nncomp_trail.nnc");
    save_checkpoint(ck, tf.path);
    {
        std::ofstream f(tf.path, std::ios::binary | std::ios::app);
        f.write("extra", 5);
    }
    CHECK_THROWS_AS(load_checkpoint<double>(tf.path), std::runtime_error);
}

TEST_CASE("version mismatch is rejected") {
    Rng rng(95);
    auto ck = init_checkpoint<double>(toy_config(2, 8, 8), rng);
    TmpFile tf("nncomp_ver.nnc");
    save_checkpoint(ck, tf.path);
    {
        std::fstream f(tf.path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        uint32_t v = 99;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint<double>(tf.path), doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("missing file gives a clear error") {
    CHECK_THROWS_WITH_AS(load_checkpoint<double>("/nonexistent/nncomp.nnc"), doctest::Contains("cannot open"),
                         std::runtime_error);
}
