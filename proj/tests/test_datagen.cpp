#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "calseg/config.hpp"
#include "calseg/datagen.hpp"

using namespace calseg;
namespace fs = std::filesystem;

namespace {

DomainSpec default_spec(int n = 20) {
    RunConfig cfg;
    DomainSpec spec = cfg.source_spec();
    spec.n_images = n;
    return spec;
}

std::vector<double> measured_shares(const Dataset& data, int C) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(C), 0);
    std::int64_t total = 0;
    for (const auto& img : data) {
        for (auto l : img.labels) {
            REQUIRE(l < C);
            ++counts[l];
            ++total;
        }
    }
    std::vector<double> shares;
    for (auto c : counts) shares.push_back(static_cast<double>(c) / static_cast<double>(total));
    return shares;
}

}  // namespace

TEST_CASE("spec validation") {
    auto spec = default_spec();
    CHECK_NOTHROW(spec.validate());
    SUBCASE("small images rejected") {
        spec.height = 8;
        CHECK_THROWS_AS(spec.validate(), Error);
    }
    SUBCASE("shares must sum to 1") {
        spec.class_freq_targets[0] += 0.1;
        CHECK_THROWS_AS(spec.validate(), Error);
    }
    SUBCASE("needs a tail class") {
        spec.class_freq_targets = {0.2, 0.2, 0.2, 0.2, 0.2};
        CHECK_THROWS_AS(spec.validate(), Error);
    }
}

TEST_CASE("generation is deterministic per (seed, index)") {
    auto spec = default_spec(6);
    auto a = generate_domain(spec);
    auto b = generate_domain(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pixels == b[i].pixels);
        CHECK(a[i].labels == b[i].labels);
    }
    // parallel-by-index property: generating one image alone matches
    auto solo = generate_image(spec, 3);
    CHECK(solo.pixels == a[3].pixels);
    CHECK(solo.labels == a[3].labels);
    // a different seed changes the content
    spec.seed += 1;
    auto c = generate_image(spec, 3);
    CHECK(c.labels != a[3].labels);
}

TEST_CASE("zero shift makes source and target bit-identical") {
    RunConfig cfg;
    cfg.shift = DomainShift{};  // zero shift
    auto src = cfg.source_spec();
    auto tgt = cfg.target_spec();
    src.n_images = tgt.n_images = 5;
    auto a = generate_domain(src);
    auto b = generate_domain(tgt);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].pixels == b[i].pixels);
        CHECK(a[i].labels == b[i].labels);
    }
}

TEST_CASE("domain shift changes pixels but never labels") {
    RunConfig cfg;
    auto src = cfg.source_spec();
    auto tgt = cfg.target_spec();
    src.n_images = tgt.n_images = 5;
    auto a = generate_domain(src);
    auto b = generate_domain(tgt);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].labels == b[i].labels);
        CHECK(a[i].pixels != b[i].pixels);
    }
}

TEST_CASE("every label map contains at least 2 distinct classes") {
    auto spec = default_spec(50);
    for (const auto& img : generate_domain(spec)) {
        std::set<std::uint8_t> distinct(img.labels.begin(), img.labels.end());
        CHECK(distinct.size() >= 2);
    }
}

TEST_CASE("empirical class frequencies track the targets") {
    auto spec = default_spec(200);
    auto data = generate_domain(spec);
    auto shares = measured_shares(data, spec.num_classes);
    for (int c = 0; c < spec.num_classes; ++c) {
        const double target = spec.class_freq_targets[static_cast<std::size_t>(c)];
        CHECK(shares[static_cast<std::size_t>(c)] >= 0.7 * target);
        CHECK(shares[static_cast<std::size_t>(c)] <= 1.3 * target);
    }
    // the tail-class band from the derived example
    CHECK(shares.back() >= 0.014);
    CHECK(shares.back() <= 0.026);
}

TEST_CASE("augment flips") {
    auto spec = default_spec(1);
    auto img = generate_image(spec, 0);
    SUBCASE("double flip is the identity") {
        auto once = hflip(img);
        auto twice = hflip(once);
        CHECK(twice.pixels == img.pixels);
        CHECK(twice.labels == img.labels);
    }
    SUBCASE("labels flip in lockstep with the image") {
        auto flipped = hflip(img);
        const int W = img.width;
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < W; ++x) {
                CHECK(flipped.labels[y * W + x] == img.labels[y * W + (W - 1 - x)]);
            }
        }
        // pixel plane 0 flips the same way
        CHECK(flipped.pixels[0 * img.height * W + 0 * W + 0] ==
              img.pixels[0 * img.height * W + 0 * W + (W - 1)]);
    }
    SUBCASE("flip probability is close to 0.5") {
        Rng rng(9);
        int flips = 0;
        const int trials = 10000;
        for (int i = 0; i < trials; ++i) {
            auto out = augment(img, rng);
            if (out.labels != img.labels) ++flips;
        }
        const double rate = static_cast<double>(flips) / trials;
        CHECK(rate >= 0.48);
        CHECK(rate <= 0.52);
    }
}

TEST_CASE("split_validation") {
    auto spec = default_spec(100);
    auto data = generate_domain(spec);
    auto [train, val] = split_validation(data, 0.1, 7);
    CHECK(train.size() == 90);
    CHECK(val.size() == 10);
    SUBCASE("same seed, same split") {
        auto [train2, val2] = split_validation(data, 0.1, 7);
        for (std::size_t i = 0; i < val.size(); ++i) CHECK(val[i].labels == val2[i].labels);
    }
    SUBCASE("partition: union equals the original set, no duplicates") {
        auto key = [](const LabeledImage& img) {
            return fnv1a(img.pixels.data(), img.pixels.size() * sizeof(float));
        };
        std::multiset<std::uint64_t> original, both;
        for (const auto& img : data) original.insert(key(img));
        for (const auto& img : train) both.insert(key(img));
        for (const auto& img : val) both.insert(key(img));
        CHECK(original == both);
    }
    SUBCASE("empty side rejected") {
        CHECK_THROWS_AS(split_validation(data, 0.001, 7), Error);
        CHECK_THROWS_AS(split_validation(data, 0.9999, 7), Error);
        CHECK_THROWS_AS(split_validation(data, 0.0, 7), Error);
    }
}

TEST_CASE("record and dataset round-trip") {
    auto spec = default_spec(4);
    auto data = generate_domain(spec);
    const fs::path dir = fs::temp_directory_path() / "calseg_test_dataset";
    fs::remove_all(dir);
    write_dataset(dir, data, spec);

    DomainSpec loaded_spec;
    auto loaded = load_dataset(dir, &loaded_spec);
    REQUIRE(loaded.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(loaded[i].pixels == data[i].pixels);
        CHECK(loaded[i].labels == data[i].labels);
    }
    CHECK(loaded_spec.num_classes == spec.num_classes);
    CHECK(loaded_spec.seed == spec.seed);
    CHECK(loaded_spec.shift.hue == spec.shift.hue);

    SUBCASE("corrupt magic names the offending file") {
        const fs::path victim = dir / "records" / "img_000002.bin";
        {
            std::ofstream f(victim, std::ios::binary);
            f << "NOTMAGIC garbage";
        }
        try {
            load_dataset(dir);
            FAIL("expected a load error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("img_000002.bin") != std::string::npos);
        }
    }
    fs::remove_all(dir);
}
