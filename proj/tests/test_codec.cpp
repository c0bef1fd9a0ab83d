#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "vicl/codec.hpp"
#include "vicl/image.hpp"
#include "vicl/rng.hpp"

using namespace vicl;

static Image random_u8_image(int w, int h, uint64_t seed) {
    Rng rng(seed);
    Image img(w, h);
    for (auto& v : img.data) v = (float)(rng.next_u64() % 256) / 255.f;
    return img;
}

TEST_CASE("patchify/unpatchify round trip") {
    Image img = random_u8_image(16, 16, 7);
    TokenGrid tg = patchify(img, 4);
    CHECK(tg.grid_h == 4);
    CHECK(tg.grid_w == 4);
    CHECK(tg.tokens.shape == Shape{16, 48});
    Image back = unpatchify(tg.tokens, tg.grid_h, tg.grid_w, tg.patch);
    CHECK(back.data == img.data);
}

TEST_CASE("token order is row-major over the patch grid, pixels row-major, channels innermost") {
    Image img(16, 16, 0.f);
    img.at(0, 0, 0) = 1.f;    // patch (0,0), first element
    img.at(5, 9, 2) = 0.5f;   // patch row 1, col 2 -> token 1*4+2=6; within: py=1,px=1,c=2
    TokenGrid tg = patchify(img, 4);
    CHECK(tg.tokens.at(0, 0) == 1.f);
    const size_t inner = ((1 * 4) + 1) * 3 + 2;
    CHECK(tg.tokens.at(6, inner) == 0.5f);
    // everything else zero
    size_t nonzero = 0;
    for (float v : tg.tokens.data) nonzero += v != 0.f;
    CHECK(nonzero == 2);
}

TEST_CASE("patchify rejects sizes not divisible by the patch") {
    Image img(15, 16, 0.f);
    CHECK_THROWS_AS(patchify(img, 4), shape_error);
}

TEST_CASE("ppm round trip is exact on the u8 grid") {
    Image img = random_u8_image(16, 12, 99);
    const std::string path = "test_roundtrip.ppm";
    save_ppm(path, img);
    Image back = load_ppm(path);
    CHECK(back.w == 16);
    CHECK(back.h == 12);
    CHECK(back.data == img.data);
    std::remove(path.c_str());
}

TEST_CASE("ppm write quantizes by rounding") {
    Image img(1, 1, 0.f);
    img.at(0, 0, 0) = 0.5f;    // 127.5 -> rounds to 128
    img.at(0, 0, 1) = 1.2f;    // clamps to 255
    img.at(0, 0, 2) = -0.3f;   // clamps to 0
    const std::string path = "test_quant.ppm";
    save_ppm(path, img);
    Image back = load_ppm(path);
    CHECK(back.at(0, 0, 0) == 128 / 255.f);
    CHECK(back.at(0, 0, 1) == 1.f);
    CHECK(back.at(0, 0, 2) == 0.f);
    std::remove(path.c_str());

    // quantize_u8 is the in-memory fixed point of that round trip
    CHECK(quantize_u8(0.5f) == 128 / 255.f);
    CHECK(quantize_u8(quantize_u8(0.73f)) == quantize_u8(0.73f));
}

TEST_CASE("ppm header parsing handles comments and rejects bad input") {
    {
        std::ofstream f("test_hdr.ppm", std::ios::binary);
        f << "P6\n# a comment\n2 1\n# another\n255\n";
        const unsigned char px[6] = {255, 0, 0, 0, 255, 0};
        f.write((const char*)px, 6);
    }
    Image img = load_ppm("test_hdr.ppm");
    CHECK(img.w == 2);
    CHECK(img.h == 1);
    CHECK(img.at(0, 0, 0) == 1.f);
    CHECK(img.at(0, 1, 1) == 1.f);
    std::remove("test_hdr.ppm");

    {
        std::ofstream f("test_bad.ppm", std::ios::binary);
        f << "P5\n2 1\n255\n";
    }
    CHECK_THROWS_AS(load_ppm("test_bad.ppm"), data_error);
    std::remove("test_bad.ppm");

    {
        std::ofstream f("test_trunc.ppm", std::ios::binary);
        f << "P6\n2 2\n255\n";
        const unsigned char px[3] = {1, 2, 3};  // needs 12 bytes
        f.write((const char*)px, 3);
    }
    CHECK_THROWS_AS(load_ppm("test_trunc.ppm"), data_error);
    std::remove("test_trunc.ppm");

    CHECK_THROWS_AS(load_ppm("does_not_exist.ppm"), data_error);
}

TEST_CASE("luminance weights") {
    CHECK(luminance(1.f, 0.f, 0.f) == doctest::Approx(0.299f));
    CHECK(luminance(0.f, 1.f, 0.f) == doctest::Approx(0.587f));
    CHECK(luminance(0.f, 0.f, 1.f) == doctest::Approx(0.114f));
    CHECK(luminance(1.f, 1.f, 1.f) == doctest::Approx(1.f));
}
