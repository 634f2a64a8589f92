#include "doctest.h"

#include "flowood/dataset.hpp"
#include "flowood/errors.hpp"
#include "flowood/image_io.hpp"
#include "flowood/random.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace flowood;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
    fs::path dir = fs::temp_directory_path() / "flowood_io_tests" / leaf;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Tensor random_image01(Rng& rng, std::int64_t c, std::int64_t h, std::int64_t w) {
    Tensor t({c, h, w});
    for (auto& v : t.data()) v = rng.uniform();
    return t;
}

} // namespace

TEST_CASE("PNG write/read round trip preserves quantized samples") {
    const fs::path dir = temp_dir("png");
    Rng rng(19);

    for (std::int64_t channels : {1, 3}) {
        CAPTURE(channels);
        Tensor img = random_image01(rng, channels, 7, 5);
        const fs::path path = dir / ("img" + std::to_string(channels) + ".png");
        write_png(path.string(), img);

        Image back = read_png(path.string());
        CHECK(back.channels == channels);
        CHECK(back.height == 7);
        CHECK(back.width == 5);
        auto data = img.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double expect = std::lround(std::min(1.0, std::max(0.0, data[i])) * 255.0);
            CHECK(back.pixels[i] == expect);
        }
    }
}

TEST_CASE("PNG output is byte-reproducible") {
    const fs::path dir = temp_dir("png_repro");
    Rng rng(23);
    Tensor img = random_image01(rng, 3, 16, 16);
    write_png((dir / "a.png").string(), img);
    write_png((dir / "b.png").string(), img);

    std::ifstream a(dir / "a.png", std::ios::binary), b(dir / "b.png", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK(!sa.empty());
}

TEST_CASE("PPM write/read round trip") {
    const fs::path dir = temp_dir("ppm");
    Rng rng(29);
    Tensor img = random_image01(rng, 3, 4, 6);
    const fs::path path = dir / "img.ppm";
    write_ppm(path.string(), img);

    Image back = read_ppm(path.string());
    CHECK(back.channels == 3);
    CHECK(back.height == 4);
    CHECK(back.width == 6);
    auto data = img.data();
    for (std::size_t i = 0; i < data.size(); ++i)
        CHECK(back.pixels[i] == std::lround(std::min(1.0, std::max(0.0, data[i])) * 255.0));

    // Header with comments parses too.
    const fs::path commented = dir / "commented.ppm";
    {
        std::ofstream os(commented, std::ios::binary);
        os << "P6\n# a comment\n2 1\n# another\n255\n";
        const unsigned char raw[6] = {1, 2, 3, 4, 5, 6};
        os.write(reinterpret_cast<const char*>(raw), 6);
    }
    Image c = read_ppm(commented.string());
    CHECK(c.width == 2);
    CHECK(c.at(0, 0, 0) == 1);
    CHECK(c.at(2, 0, 1) == 6);

    CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string()), IoError);
    const fs::path bad = dir / "bad.ppm";
    std::ofstream(bad, std::ios::binary) << "P5\n1 1\n255\nx";
    CHECK_THROWS_AS(read_ppm(bad.string()), IoError);
}

TEST_CASE("channel conversion") {
    Image gray;
    gray.channels = 1;
    gray.height = 1;
    gray.width = 2;
    gray.pixels = {10, 200};
    Image rgb = convert_channels(gray, 3);
    CHECK(rgb.at(0, 0, 0) == 10);
    CHECK(rgb.at(1, 0, 0) == 10);
    CHECK(rgb.at(2, 0, 1) == 200);

    rgb.at(0, 0, 0) = 30; // (30+10+10)/3 rounds to 17
    Image back = convert_channels(rgb, 1);
    CHECK(back.at(0, 0, 0) == 17);
    CHECK(back.at(0, 0, 1) == 200);
}

TEST_CASE("center crop and box downsample") {
    // 6x8 ramp, extent 2: crop side 6 -> central 6x6, factor 3.
    Image src;
    src.channels = 1;
    src.height = 6;
    src.width = 8;
    src.pixels.resize(48);
    for (std::int64_t y = 0; y < 6; ++y)
        for (std::int64_t x = 0; x < 8; ++x) src.at(0, y, x) = static_cast<double>(y * 8 + x);

    Image out = fit_to_extent(src, 2);
    CHECK(out.height == 2);
    CHECK(out.width == 2);
    // Crop starts at x0 = 1, y0 = 0. Block mean of a linear ramp is its
    // center value: rows 0..2 x cols 1..3 -> mean(y*8+x) = 1*8 + 2 = 10.
    CHECK(out.at(0, 0, 0) == 10);
    CHECK(out.at(0, 0, 1) == 13);
    CHECK(out.at(0, 1, 0) == 34);
    CHECK(out.at(0, 1, 1) == 37);

    // Exact-size input is a no-op.
    Image same = fit_to_extent(src, 6);
    CHECK(same.at(0, 0, 0) == src.at(0, 0, 1)); // crop dropped one left column

    CHECK_THROWS_AS(fit_to_extent(src, 7), ValueError);
}

TEST_CASE("directory loading: order, conversion, warnings") {
    const fs::path dir = temp_dir("dataset");
    fs::create_directories(dir / "sub");
    Rng rng(31);

    write_png((dir / "b.png").string(), random_image01(rng, 3, 8, 8));
    write_png((dir / "a.png").string(), random_image01(rng, 1, 12, 9)); // gray, needs crop
    write_ppm((dir / "sub" / "c.ppm").string(), random_image01(rng, 3, 8, 8));
    std::ofstream(dir / "broken.png") << "not a png";
    std::ofstream(dir / "notes.txt") << "ignored";
    write_png((dir / "tiny.png").string(), random_image01(rng, 3, 4, 4)); // under extent

    std::vector<std::string> warnings;
    Dataset d = load_image_directory(dir.string(), 8, 3, &warnings);
    CHECK(d.size() == 3);
    CHECK(d.item_shape == Shape{3, 8, 8});
    CHECK(d.ids[0] == "a.png");
    CHECK(d.ids[1] == "b.png");
    CHECK(d.ids[2] == "sub/c.ppm");
    CHECK(warnings.size() == 2); // broken.png and tiny.png

    for (const auto& item : d.items)
        for (double v : item.data()) {
            CHECK(v == std::floor(v));
            CHECK(v >= 0.0);
            CHECK(v <= 255.0);
        }

    Tensor batch = dataset_batch(d, {2, 0});
    CHECK(batch.shape() == Shape{2, 3, 8, 8});
    CHECK(batch.at(0) == d.items[2].at(0));
    CHECK(batch.at(batch.numel() - 1) == d.items[0].at(d.items[0].numel() - 1));

    CHECK_THROWS_AS(load_image_directory((dir / "nope").string(), 8, 3, nullptr), IoError);
    const fs::path empty = temp_dir("dataset_empty");
    CHECK_THROWS_AS(load_image_directory(empty.string(), 8, 3, nullptr), IoError);
}
