#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "morphkit/datasets.hpp"
#include "morphkit/rng.hpp"

using namespace morphkit;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& leaf) { return fs::temp_directory_path() / leaf; }

LabeledSet tiny_set() {
    LabeledSet set;
    Rng rng(77);
    for (int i = 0; i < 6; ++i) {
        Image img(5, 4);
        for (auto& v : img.pix) v = rng.next_below(256) / 255.0;
        set.images.push_back(img);
        set.labels.push_back(i % 3);
    }
    return set;
}

}  // namespace

TEST_CASE("IDX round-trip") {
    auto set = tiny_set();
    const auto ip = scratch("mk_rt_images.idx").string();
    const auto lp = scratch("mk_rt_labels.idx").string();
    write_idx(ip, lp, set);
    auto back = load_idx(ip, lp);
    REQUIRE(back.images.size() == set.images.size());
    CHECK(back.labels == set.labels);
    for (std::size_t i = 0; i < set.images.size(); ++i) {
        CHECK(back.images[i].rows == 5);
        CHECK(back.images[i].cols == 4);
        // pixels are exact 1/255 multiples, so quantization is lossless
        CHECK(taxicab(back.images[i], set.images[i]) <= 1e-12);
    }
    fs::remove(ip);
    fs::remove(lp);
}

TEST_CASE("load_idx rejects a label file offered as images") {
    auto set = tiny_set();
    const auto ip = scratch("mk_bad_images.idx").string();
    const auto lp = scratch("mk_bad_labels.idx").string();
    write_idx(ip, lp, set);
    // labels file has magic 2049, not the image magic 2051
    CHECK_THROWS_AS(load_idx(lp, lp), std::runtime_error);
    // truncated image payload
    const auto tp = scratch("mk_trunc.idx").string();
    {
        std::ifstream in(ip, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(tp, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_idx(tp, lp), std::runtime_error);
    // count mismatch between image and label files
    LabeledSet fewer = set;
    fewer.images.pop_back();
    fewer.labels.pop_back();
    const auto ip2 = scratch("mk_fewer_images.idx").string();
    const auto lp2 = scratch("mk_fewer_labels.idx").string();
    write_idx(ip2, lp2, fewer);
    CHECK_THROWS_AS(load_idx(ip, lp2), std::runtime_error);
    for (const auto& p : {ip, lp, tp, ip2, lp2}) fs::remove(p);
}

TEST_CASE("gen_scgs is deterministic, balanced, and binary-valued") {
    auto a = gen_scgs(4, 32, 123);
    auto b = gen_scgs(4, 32, 123);
    auto c = gen_scgs(4, 32, 124);
    REQUIRE(a.images.size() == 20);
    CHECK(a.labels == b.labels);
    CHECK(a.class_names.size() == 5);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        CHECK(taxicab(a.images[i], b.images[i]) == 0.0);
        if (taxicab(a.images[i], c.images[i]) != 0.0) any_diff = true;
    }
    CHECK(any_diff);

    int counts[5] = {0};
    for (int lab : a.labels) {
        REQUIRE(lab >= 0);
        REQUIRE(lab < 5);
        ++counts[lab];
    }
    for (int k : counts) CHECK(k == 4);

    for (const auto& img : a.images) {
        CHECK(img.rows == 32);
        bool any_white = false, any_black = false;
        for (double v : img.pix) {
            CHECK((v == 0.0 || v == 1.0));
            any_white |= v == 1.0;
            any_black |= v == 0.0;
        }
        CHECK(any_white);
        CHECK(any_black);
        // 2-pixel margin stays empty
        for (int r = 0; r < img.rows; ++r)
            for (int c2 : {0, 1, img.cols - 2, img.cols - 1}) CHECK(img.at(r, c2) == 0.0);
        for (int c2 = 0; c2 < img.cols; ++c2)
            for (int r : {0, 1, img.rows - 2, img.rows - 1}) CHECK(img.at(r, c2) == 0.0);
    }
}

TEST_CASE("gen_digits is deterministic 28x28 with all ten classes") {
    auto a = gen_digits(40, 9);
    auto b = gen_digits(40, 9);
    REQUIRE(a.images.size() == 40);
    CHECK(a.labels == b.labels);
    bool seen[10] = {false};
    for (std::size_t i = 0; i < a.images.size(); ++i) {
        CHECK(taxicab(a.images[i], b.images[i]) == 0.0);
        CHECK(a.images[i].rows == 28);
        CHECK(a.images[i].cols == 28);
        seen[a.labels[i]] = true;
        double mx = 0;
        for (double v : a.images[i].pix) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            mx = std::max(mx, v);
        }
        CHECK(mx > 0.5);
    }
    for (bool s : seen) CHECK(s);
}

TEST_CASE("make_pairs applies the hard oracle in sequence") {
    Image img(5, 5);
    img.at(2, 2) = 1.0;
    auto se = builtin_se("diamond3");
    auto pairs = make_pairs({img}, {{MorphMode::Dilate, se}, {MorphMode::Erode, se}});
    REQUIRE(pairs.inputs.size() == 1);
    Image want = hard_morph(hard_morph(img, se, MorphMode::Dilate), se, MorphMode::Erode);
    CHECK(taxicab(pairs.targets[0], want) == 0.0);
    CHECK_FALSE(pairs.provenance.empty());

    StructuringElement giant;
    giant.shape = {9, 9};
    giant.weights.assign(81, 1.0);
    CHECK_THROWS(make_pairs({Image(3, 3)}, {{MorphMode::Dilate, giant}}));
}

TEST_CASE("PGM round-trip within quantization error") {
    Image img(6, 7);
    Rng rng(200);
    for (auto& v : img.pix) v = rng.uniform(0, 1);
    const auto path = scratch("mk_rt.pgm").string();
    write_pgm(img, path);
    Image back = read_pgm(path);
    REQUIRE(back.rows == 6);
    REQUIRE(back.cols == 7);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(std::abs(back.pix[i] - img.pix[i]) <= 0.5 / 255.0 + 1e-12);
    // exact byte multiples survive untouched
    Image quant = back;
    write_pgm(quant, path);
    CHECK(taxicab(read_pgm(path), quant) == 0.0);
    fs::remove(path);
}

TEST_CASE("read_pgm rejects corrupted headers and truncated payloads") {
    const auto path = scratch("mk_bad.pgm").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "P6\n2 2\n255\n"
            << std::string(4, '\0');
    }
    CHECK_THROWS(read_pgm(path));
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5\n4 4\n255\n"
            << std::string(7, '\0');  // 16 pixels promised, 7 delivered
    }
    CHECK_THROWS(read_pgm(path));
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5\n2 2\n65535\n" << std::string(8, '\0');
    }
    CHECK_THROWS(read_pgm(path));
    fs::remove(path);
}

TEST_CASE("SE JSON round-trip and validation") {
    auto se = builtin_se("nonflat3");
    const auto path = scratch("mk_se.json").string();
    export_se_json(se, path);
    auto back = import_se_json(path);
    CHECK(back.shape.height == 3);
    CHECK(back.shape.width == 3);
    CHECK(back.kind == SeKind::NonFlat);
    CHECK(back.weights == se.weights);
    {
        std::ofstream out(path);
        out << R"({"rows":3,"cols":3,"values":[1,1,1,1,1,1,1,1],"form":"additive","kind":"flat"})";
    }
    CHECK_THROWS(import_se_json(path));
    fs::remove(path);
}

TEST_CASE("image directory round-trip via PGM plus labels.csv") {
    auto dir = scratch("mk_imgdir");
    fs::remove_all(dir);
    auto set = tiny_set();
    write_image_dir(dir.string(), set);
    CHECK(fs::exists(dir / "labels.csv"));
    auto back = load_image_dir(dir.string());
    REQUIRE(back.images.size() == set.images.size());
    CHECK(back.labels == set.labels);
    for (std::size_t i = 0; i < set.images.size(); ++i)
        CHECK(taxicab(back.images[i], set.images[i]) <= 1e-12);
    fs::remove_all(dir);
}
