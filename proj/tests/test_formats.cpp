#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "calseg/checkpoint.hpp"
#include "calseg/config.hpp"
#include "calseg/model.hpp"
#include "calseg/rng.hpp"

using namespace calseg;
namespace fs = std::filesystem;

TEST_CASE("checkpoint restores bit-identical forward passes") {
    SegModel<float> model(3, 5, {8, 8}, 0, 31);
    ValueNet<float> vnet(8, 32);
    // move the running stats away from their initial values
    Rng rng(33);
    auto x = ad::Tensor<float>::zeros({2, 3, 16, 16});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
    (void)model.forward(x, ad::BNMode::train);

    Checkpoint ckpt;
    ckpt.stage = "source";
    store_model(ckpt, model);
    store_model(ckpt, vnet);
    ckpt.metrics = {{"epoch", 3.0}, {"val_ece_mean", 0.123456789}};

    const fs::path path = fs::temp_directory_path() / "calseg_test.ckpt";
    save_checkpoint(ckpt, path);
    Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.stage == "source");
    CHECK(loaded.metric("epoch") == 3.0);
    CHECK(loaded.metric("val_ece_mean") == 0.123456789);
    CHECK(checkpoint_has_valuenet(loaded));

    SegModel<float> restored(3, 5, {8, 8}, 0, 999);  // different init seed
    restore_model(loaded, restored);
    auto a = model.forward(x, ad::BNMode::eval).logits;
    auto b = restored.forward(x, ad::BNMode::eval).logits;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

    SUBCASE("corrupt magic is rejected") {
        std::ofstream f(path, std::ios::binary);
        f << "WRONGMAGIC and then some";
        f.close();
        CHECK_THROWS_AS(load_checkpoint(path), Error);
    }
    SUBCASE("missing arrays are reported by name") {
        Checkpoint partial;
        partial.stage = "source";
        store_model(partial, vnet);  // value net only
        save_checkpoint(partial, path);
        SegModel<float> target(3, 5, {8, 8}, 0, 1);
        try {
            restore_model(load_checkpoint(path), target);
            FAIL("expected a missing-array error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("seg.block1.conv.weight") != std::string::npos);
        }
    }
    fs::remove(path);
}

TEST_CASE("checkpoint save/load is byte-stable") {
    SegModel<float> model(3, 4, {8}, 0, 3);
    Checkpoint ckpt;
    ckpt.stage = "source";
    store_model(ckpt, model);
    ckpt.metrics = {{"epoch", 1.0}};
    const fs::path a = fs::temp_directory_path() / "calseg_a.ckpt";
    const fs::path b = fs::temp_directory_path() / "calseg_b.ckpt";
    save_checkpoint(ckpt, a);
    save_checkpoint(load_checkpoint(a), b);
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    fs::remove(a);
    fs::remove(b);
}

TEST_CASE("config parsing") {
    SUBCASE("defaults validate and echo every key") {
        RunConfig cfg;
        CHECK_NOTHROW(cfg.validate());
        const std::string echo = serialize_config(cfg);
        CHECK(echo.find("seed = 1") != std::string::npos);
        CHECK(echo.find("calib.alpha = 1") != std::string::npos);
        CHECK(echo.find("target.delta = 0.15") != std::string::npos);
        CHECK(echo.find("source.weight_decay = 0.0005") != std::string::npos);
    }
    SUBCASE("unknown keys rejected") {
        RunConfig cfg;
        CHECK_THROWS_AS(apply_config_entry(cfg, "nonsense.key", "1"), Error);
    }
    SUBCASE("file parsing with comments and overrides") {
        const fs::path path = fs::temp_directory_path() / "calseg_test.cfg";
        {
            std::ofstream f(path);
            f << "# a comment\n"
              << "seed = 42\n"
              << "calib.alpha = 0\n"
              << "data.height=32\n"
              << "\n"
              << "target.rounds = 1\n";
        }
        RunConfig cfg;
        apply_config_file(cfg, path);
        CHECK(cfg.seed == 42);
        CHECK(cfg.calib.alpha == 0.0);
        CHECK(cfg.height == 32);
        CHECK(cfg.target.rounds == 1);
        fs::remove(path);
    }
    SUBCASE("round-trip: echo parses back to the same echo") {
        RunConfig cfg;
        cfg.seed = 9;
        cfg.calib.alpha = 0.5;
        cfg.class_freq = {0.7, 0.2, 0.06, 0.02, 0.02};
        const std::string echo = serialize_config(cfg);
        const fs::path path = fs::temp_directory_path() / "calseg_echo.cfg";
        {
            std::ofstream f(path);
            f << echo;
        }
        RunConfig reparsed;
        apply_config_file(reparsed, path);
        CHECK(serialize_config(reparsed) == echo);
        fs::remove(path);
    }
    SUBCASE("validation rejects bad values") {
        RunConfig cfg;
        cfg.target.delta = 0.0;
        CHECK_THROWS_AS(cfg.validate(), Error);
        cfg = RunConfig{};
        cfg.source.batch = 1;  // BatchNorm needs >= 2
        CHECK_THROWS_AS(cfg.validate(), Error);
        cfg = RunConfig{};
        cfg.model_tap = 9;
        CHECK_THROWS_AS(cfg.validate(), Error);
    }
    SUBCASE("schema text documents every key with its default") {
        const std::string schema = config_schema_text();
        const RunConfig defaults;
        for (const auto& line : split(serialize_config(defaults), '\n')) {
            if (trim(line).empty()) continue;
            const auto key = std::string(trim(line.substr(0, line.find('=') - 1)));
            CHECK(schema.find(key) != std::string::npos);
        }
    }
}

TEST_CASE("domain spec serialization round-trip") {
    RunConfig cfg;
    DomainSpec spec = cfg.target_spec();
    auto kv = serialize_spec(spec);
    DomainSpec back = parse_spec(kv);
    CHECK(back.n_images == spec.n_images);
    CHECK(back.num_classes == spec.num_classes);
    CHECK(back.class_freq_targets == spec.class_freq_targets);
    CHECK(back.palette_mean == spec.palette_mean);
    CHECK(back.shift.hue == spec.shift.hue);
    CHECK(back.shift.noise_sigma == spec.shift.noise_sigma);
    CHECK(back.seed == spec.seed);
}
