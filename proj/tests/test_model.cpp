#include <doctest.h>

#include <cmath>

#include "calseg/checkpoint.hpp"
#include "calseg/model.hpp"
#include "calseg/rng.hpp"

using namespace calseg;
namespace {
using Tf = ad::Tensor<float>;

SegModel<float> small_model(std::uint64_t seed = 11) {
    return SegModel<float>(3, 5, {16, 32, 32, 32}, 2, seed);
}

Tf random_batch(int n, int c, int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Tf t = Tf::zeros({n, c, h, w});
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
    return t;
}

}  // namespace

TEST_CASE("seg_forward shapes and spatial preservation") {
    auto model = small_model();
    auto x = random_batch(2, 3, 16, 16, 1);
    auto out = model.forward(x, ad::BNMode::eval);
    CHECK(out.logits.shape() == ad::Shape{2, 5, 16, 16});
    CHECK(out.feature.shape() == ad::Shape{2, 32, 16, 16});
    CHECK(model.feature_channels() == 32);
    CHECK_THROWS_AS(model.forward(random_batch(2, 4, 16, 16, 1), ad::BNMode::eval), Error);
}

TEST_CASE("zero-initialized classifier head gives uniform probabilities") {
    auto model = small_model();
    for (auto& p : model.params()) {
        if (p.name.rfind("seg.head.", 0) == 0) {
            for (auto& v : p.tensor.data()) v = 0.f;
        }
    }
    auto out = model.forward(random_batch(2, 3, 16, 16, 2), ad::BNMode::eval);
    auto probs = ad::softmax(out.logits, 1);
    for (float p : probs.data()) CHECK(p == doctest::Approx(0.2f).epsilon(1e-5));
}

TEST_CASE("fixed seed and input give bit-identical logits") {
    auto a = small_model(77);
    auto b = small_model(77);
    auto x = random_batch(2, 3, 16, 16, 3);
    auto la = a.forward(x, ad::BNMode::eval).logits;
    auto lb = b.forward(x, ad::BNMode::eval).logits;
    CHECK(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));
    // and across two invocations of the same instance
    auto la2 = a.forward(x, ad::BNMode::eval).logits;
    CHECK(std::equal(la.data().begin(), la.data().end(), la2.data().begin()));
}

TEST_CASE("value_forward") {
    auto model = small_model();
    ValueNet<float> vnet(model.feature_channels(), 21);
    auto feature = model.forward(random_batch(3, 3, 16, 16, 4), ad::BNMode::eval).feature;

    SUBCASE("output in (0,1), one scalar per image") {
        auto y = vnet.forward(feature, ad::BNMode::eval);
        CHECK(y.shape() == ad::Shape{3, 1});
        for (float v : y.data()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
    SUBCASE("zero-weight linear head outputs 0.5") {
        for (auto& p : vnet.params()) {
            if (p.name.rfind("value.fc.", 0) == 0) {
                for (auto& v : p.tensor.data()) v = 0.f;
            }
        }
        auto y = vnet.forward(feature, ad::BNMode::eval);
        for (float v : y.data()) CHECK(v == doctest::Approx(0.5f).epsilon(1e-6));
    }
    SUBCASE("identical images get identical estimates in eval mode") {
        auto one = model.forward(random_batch(1, 3, 16, 16, 5), ad::BNMode::eval).feature;
        auto two = Tf::zeros({2, 32, 16, 16});
        std::copy(one.data().begin(), one.data().end(), two.data().begin());
        std::copy(one.data().begin(), one.data().end(), two.data().begin() + one.numel());
        auto y = vnet.forward(two, ad::BNMode::eval);
        CHECK(y.data()[0] == y.data()[1]);
    }
    SUBCASE("gradients flow to the value net only when theta is frozen") {
        set_stage_masks(model, &vnet, Stage::valuenet);
        auto x = random_batch(2, 3, 16, 16, 6);
        ad::Tape<float> tape;
        auto out = model.forward(x, ad::BNMode::eval);
        auto y = vnet.forward(out.feature, ad::BNMode::train);
        tape.backward(ad::mean(y));
        for (auto& p : model.params()) CHECK_FALSE(p.tensor.has_grad());
        bool some_value_grad = false;
        for (auto& p : vnet.params()) {
            if (p.tensor.has_grad()) some_value_grad = true;
        }
        CHECK(some_value_grad);
    }
}

TEST_CASE("set_stage_masks") {
    auto model = small_model();
    ValueNet<float> vnet(model.feature_channels(), 22);

    auto count_trainable = [](auto& net) {
        int n = 0;
        for (auto& p : net.params()) {
            if (p.tensor.requires_grad()) ++n;
        }
        return n;
    };

    SUBCASE("source: all theta trainable") {
        set_stage_masks(model, &vnet, Stage::source);
        CHECK(count_trainable(model) == static_cast<int>(model.params().size()));
        CHECK(count_trainable(vnet) == 0);
    }
    SUBCASE("valuenet: theta frozen, phi trainable") {
        set_stage_masks(model, &vnet, Stage::valuenet);
        CHECK(count_trainable(model) == 0);
        CHECK(count_trainable(vnet) == static_cast<int>(vnet.params().size()));
    }
    SUBCASE("warmup: exactly the BN affine parameters") {
        set_stage_masks(model, &vnet, Stage::warmup);
        for (auto& p : model.params()) {
            const bool affine = p.name.find(".bn.gamma") != std::string::npos ||
                                p.name.find(".bn.beta") != std::string::npos;
            CHECK(p.tensor.requires_grad() == affine);
        }
        for (auto& p : vnet.params()) {
            const bool affine = p.name.find(".bn.gamma") != std::string::npos ||
                                p.name.find(".bn.beta") != std::string::npos;
            CHECK(p.tensor.requires_grad() == affine);
        }
    }
    SUBCASE("adapt: feature extractor and value net frozen, head side trainable") {
        set_stage_masks(model, &vnet, Stage::adapt);
        for (auto& p : model.params()) {
            const bool extractor = model.is_extractor_param(p.name);
            CHECK(p.tensor.requires_grad() == !extractor);
        }
        CHECK(count_trainable(vnet) == 0);
        // blocks 1..3 feed the tap (tap index 2); block4 and the head adapt
        CHECK(model.is_extractor_param("seg.block1.conv.weight"));
        CHECK(model.is_extractor_param("seg.block3.bn.gamma"));
        CHECK_FALSE(model.is_extractor_param("seg.block4.conv.weight"));
        CHECK_FALSE(model.is_extractor_param("seg.head.weight"));
    }
    SUBCASE("adapt: no gradient ever reaches phi or the extractor") {
        set_stage_masks(model, &vnet, Stage::adapt);
        auto x = random_batch(2, 3, 16, 16, 7);
        ad::Tape<float> tape;
        auto out = model.forward(x, ad::BNMode::train);
        tape.backward(ad::mean(out.logits));
        for (auto& p : model.params()) {
            if (model.is_extractor_param(p.name)) CHECK_FALSE(p.tensor.has_grad());
        }
        for (auto& p : vnet.params()) CHECK_FALSE(p.tensor.has_grad());
        CHECK(model.params().size() > 0);
    }
}

TEST_CASE("frozen parameters stay bit-identical under masked updates") {
    auto model = small_model();
    ValueNet<float> vnet(model.feature_channels(), 23);
    set_stage_masks(model, &vnet, Stage::warmup);
    const auto before = state_checksum<float>(model, /*include_buffers=*/false,
                                              [&](const std::string& name) {
                                                  return name.find(".bn.") == std::string::npos;
                                              });
    // run a few forward/backward/update steps touching only gamma/beta
    auto x = random_batch(2, 3, 16, 16, 8);
    for (int step = 0; step < 3; ++step) {
        ad::Tape<float> tape;
        auto out = model.forward(x, ad::BNMode::stat_only);
        tape.backward(ad::mean(out.logits));
        for (auto& p : model.params()) {
            if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
            auto v = p.tensor.data();
            auto g = p.tensor.grad_view();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.01f * g[i];
            p.tensor.zero_grad();
        }
    }
    const auto after = state_checksum<float>(model, false, [&](const std::string& name) {
        return name.find(".bn.") == std::string::npos;
    });
    CHECK(before == after);
    // and the BN affine parameters did move
    const auto bn_before = state_checksum<float>(model, false, [](const std::string& name) {
        return name.find(".bn.gamma") != std::string::npos;
    });
    CHECK(bn_before != 0);
}

TEST_CASE("warmup changes running stats while non-BN parameters stay fixed") {
    auto model = small_model();
    ValueNet<float> vnet(model.feature_channels(), 24);
    set_stage_masks(model, &vnet, Stage::warmup);
    std::vector<float> mean_before = *model.buffers()[0].values;
    const auto non_bn_before = state_checksum<float>(model, false, [&](const std::string& n) {
        return n.find(".bn.") == std::string::npos;
    });
    auto x = random_batch(4, 3, 16, 16, 9);
    (void)model.forward(x, ad::BNMode::stat_only);
    CHECK(*model.buffers()[0].values != mean_before);
    const auto non_bn_after = state_checksum<float>(model, false, [&](const std::string& n) {
        return n.find(".bn.") == std::string::npos;
    });
    CHECK(non_bn_before == non_bn_after);
}
