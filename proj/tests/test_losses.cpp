#include <doctest.h>

#include <cmath>

#include "calseg/rng.hpp"
#include "calseg/source_stage.hpp"
#include "calseg/target_stage.hpp"

using namespace calseg;
namespace {
using Td = ad::Tensor<double>;

// logits whose softmax equals the given per-pixel probabilities (2 classes)
Td two_class_logits(const std::vector<double>& p_class0) {
    const int n = static_cast<int>(p_class0.size());
    Td logits = Td::zeros({1, 2, 1, n});
    auto lv = logits.data();
    for (int i = 0; i < n; ++i) {
        const double z = 0.5 * std::log(p_class0[static_cast<std::size_t>(i)] /
                                        (1 - p_class0[static_cast<std::size_t>(i)]));
        lv[i] = z;
        lv[n + i] = -z;
    }
    return logits;
}

}  // namespace

TEST_CASE("seg_loss") {
    SUBCASE("perfect one-hot prediction gives 0") {
        auto logits = Td::from({1, 2, 1, 1}, {50.0, -50.0});
        std::vector<int> labels = {0};
        CHECK(seg_loss(logits, labels).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("uniform prediction gives ln C") {
        auto logits = Td::zeros({1, 5, 2, 2});
        std::vector<int> labels = {0, 1, 2, 3};
        CHECK(seg_loss(logits, labels).item() ==
              doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("probability 0.8 on the true class gives -ln 0.8") {
        auto logits = two_class_logits({0.8});
        std::vector<int> labels = {0};
        CHECK(seg_loss(logits, labels).item() ==
              doctest::Approx(-std::log(0.8)).epsilon(1e-11));
    }
    SUBCASE("ignored pixels are excluded; all-ignored is an error") {
        auto logits = two_class_logits({0.8, 0.3});
        std::vector<int> labels = {0, 255};
        CHECK(seg_loss(logits, labels).item() ==
              doctest::Approx(-std::log(0.8)).epsilon(1e-11));
        std::vector<int> ignored = {255, 255};
        CHECK_THROWS_AS(seg_loss(logits, ignored), Error);
    }
}

TEST_CASE("sce_loss") {
    const std::vector<double> w = {0.5, 0.5};
    SUBCASE("derived hand case with the stated clamps") {
        auto probs = Td::from({1, 2, 1, 1}, {0.8, 0.2});
        std::vector<std::uint8_t> pseudo = {0};
        auto r = sce_loss(probs, pseudo, w, 0.1);
        const double wce = 0.5 * (-std::log(0.8));
        const double rce = -(0.2 * std::log(1e-4));
        CHECK(r.wce.item() == doctest::Approx(wce).epsilon(1e-9));
        CHECK(r.rce.item() == doctest::Approx(rce).epsilon(1e-9));
        CHECK(r.total.item() == doctest::Approx(0.1 * wce + rce).epsilon(1e-9));
        CHECK(r.total.item() == doctest::Approx(1.85322).epsilon(1e-5));
    }
    SUBCASE("epsilon = 0 reduces to the reverse term exactly") {
        Rng rng(5);
        std::vector<double> p;
        for (int i = 0; i < 6; ++i) p.push_back(rng.uniform(0.05, 0.95));
        auto probs = ad::softmax(two_class_logits(p), 1);
        std::vector<std::uint8_t> pseudo = {0, 1, 255, 0, 1, 0};
        auto r = sce_loss(probs, pseudo, w, 0.0);
        CHECK(r.total.item() == r.rce.item());
    }
    SUBCASE("perfect one-hot prediction matching the pseudo-label gives 0 + 0") {
        auto probs = Td::from({1, 2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
        std::vector<std::uint8_t> pseudo = {0, 1};
        auto r = sce_loss(probs, pseudo, w, 0.1);
        CHECK(r.wce.item() == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(r.rce.item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("finite for degenerate simplex inputs under the clamps") {
        auto probs = Td::from({1, 2, 1, 2}, {0.0, 1.0, 1.0, 0.0});
        std::vector<std::uint8_t> pseudo = {0, 1};  // exactly wrong
        auto r = sce_loss(probs, pseudo, w, 0.1);
        CHECK(std::isfinite(r.total.item()));
    }
    SUBCASE("zero labeled pixels is an error") {
        auto probs = Td::from({1, 2, 1, 1}, {0.5, 0.5});
        std::vector<std::uint8_t> pseudo = {255};
        CHECK_THROWS_AS(sce_loss(probs, pseudo, w, 0.1), Error);
    }
    SUBCASE("pixels labeled 255 contribute zero gradient") {
        Rng rng(6);
        std::vector<double> p;
        for (int i = 0; i < 4; ++i) p.push_back(rng.uniform(0.1, 0.9));
        auto logits = two_class_logits(p);
        logits.set_requires_grad(true);
        std::vector<std::uint8_t> pseudo = {0, 255, 1, 255};
        ad::Tape<double> tape;
        auto probs = ad::softmax(logits, 1);
        auto r = sce_loss(probs, pseudo, w, 0.1);
        tape.backward(r.total);
        auto g = logits.grad_view();
        // gradient at ignored pixels (columns 1 and 3 of both planes) is 0
        CHECK(g[1] == 0.0);
        CHECK(g[3] == 0.0);
        CHECK(g[4 + 1] == 0.0);
        CHECK(g[4 + 3] == 0.0);
        CHECK(g[0] != 0.0);
    }
}

TEST_CASE("entropy_loss") {
    SUBCASE("one-hot gives 0") {
        auto probs = Td::from({1, 2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
        CHECK(entropy_loss(probs).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("uniform gives ln C per pixel") {
        auto probs = Td::full({1, 4, 2, 2}, 0.25);
        CHECK(entropy_loss(probs).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("derived arithmetic case") {
        auto probs = Td::from({1, 2, 1, 1}, {0.8, 0.2});
        const double expect = -(0.8 * std::log(0.8) + 0.2 * std::log(0.2));
        CHECK(entropy_loss(probs).item() == doctest::Approx(expect).epsilon(1e-12));
        CHECK(entropy_loss(probs).item() == doctest::Approx(0.50040).epsilon(1e-4));
    }
}

TEST_CASE("negative_loss") {
    SUBCASE("derived values via forced sampling (C=2 has one complement)") {
        // complementary class of 0 is always 1
        auto probs = Td::from({1, 2, 1, 1}, {0.95, 0.05});
        std::vector<std::uint8_t> pseudo = {0};
        Rng rng(1);
        CHECK(negative_loss(probs, pseudo, rng).item() ==
              doctest::Approx(-std::log(0.95)).epsilon(1e-9));
        // and the frozen arithmetic value
        Rng rng2(1);
        CHECK(negative_loss(probs, pseudo, rng2).item() ==
              doctest::Approx(0.05129).epsilon(1e-4));
    }
    SUBCASE("f = 0 contributes 0") {
        auto probs = Td::from({1, 2, 1, 1}, {1.0, 0.0});
        std::vector<std::uint8_t> pseudo = {0};
        Rng rng(2);
        CHECK(negative_loss(probs, pseudo, rng).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("f -> 1 is clamped at 1 - 1e-7") {
        auto probs = Td::from({1, 2, 1, 1}, {0.0, 1.0});
        std::vector<std::uint8_t> pseudo = {0};  // complement is class 1 with prob 1
        Rng rng(3);
        const double loss = negative_loss(probs, pseudo, rng).item();
        CHECK(std::isfinite(loss));
        CHECK(loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
    }
    SUBCASE("C = 1 is an error") {
        auto probs = Td::full({1, 1, 1, 1}, 1.0);
        std::vector<std::uint8_t> pseudo = {0};
        Rng rng(4);
        CHECK_THROWS_AS(negative_loss(probs, pseudo, rng), Error);
    }
    SUBCASE("sampled complement never equals the pseudo-label") {
        Rng data_rng(7);
        const int C = 5;
        auto probs = Td::full({1, C, 1, 8}, 1.0 / C);
        std::vector<std::uint8_t> pseudo = {0, 1, 2, 3, 4, 0, 255, 2};
        // with uniform probs every complement contributes -log(1 - 1/C)
        Rng rng(8);
        const double expect = -std::log(1.0 - 1.0 / C);
        CHECK(negative_loss(probs, pseudo, rng).item() ==
              doctest::Approx(expect).epsilon(1e-9));
        (void)data_rng;
    }
    SUBCASE("ignored pixels contribute zero gradient") {
        auto logits = two_class_logits({0.7, 0.6});
        logits.set_requires_grad(true);
        std::vector<std::uint8_t> pseudo = {0, 255};
        Rng rng(9);
        ad::Tape<double> tape;
        auto probs = ad::softmax(logits, 1);
        tape.backward(negative_loss(probs, pseudo, rng));
        auto g = logits.grad_view();
        CHECK(g[1] == 0.0);
        CHECK(g[3] == 0.0);
    }
}

TEST_CASE("L_tar is finite for any simplex probs under the stated clamps") {
    Rng rng(10);
    for (int rep = 0; rep < 50; ++rep) {
        const int C = 3;
        const int n = 6;
        Td probs = Td::zeros({1, C, 1, n});
        auto pv = probs.data();
        for (int i = 0; i < n; ++i) {
            // random point on the simplex, occasionally a hard vertex
            std::vector<double> p(C);
            if (rng.bernoulli(0.3)) {
                p.assign(C, 0.0);
                p[rng.uniform_int(C)] = 1.0;
            } else {
                double s = 0;
                for (auto& v : p) {
                    v = rng.uniform(0.0, 1.0);
                    s += v;
                }
                for (auto& v : p) v /= s;
            }
            for (int c = 0; c < C; ++c) pv[c * n + i] = p[static_cast<std::size_t>(c)];
        }
        std::vector<std::uint8_t> pseudo(n);
        for (auto& l : pseudo) {
            l = rng.bernoulli(0.2) ? 255 : static_cast<std::uint8_t>(rng.uniform_int(C));
        }
        bool any = false;
        for (auto l : pseudo) any |= (l != 255);
        if (!any) pseudo[0] = 0;
        const std::vector<double> w = {0.2, 0.3, 0.5};
        Rng neg_rng(rep);
        auto sce = sce_loss(probs, pseudo, w, 0.1);
        auto neg = negative_loss(probs, pseudo, neg_rng);
        auto ent = entropy_loss(probs);
        const double total = sce.total.item() + neg.item() + 0.005 * ent.item();
        CHECK(std::isfinite(total));
    }
}

TEST_CASE("poly learning rate endpoints") {
    CHECK(poly_lr(5e-4, 0, 1000, 0.9) == doctest::Approx(5e-4).epsilon(1e-15));
    CHECK(poly_lr(5e-4, 1000, 1000, 0.9) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(poly_lr(5e-4, 500, 1000, 0.9) ==
          doctest::Approx(5e-4 * std::pow(0.5, 0.9)).epsilon(1e-12));
    // monotone decay
    double prev = 1e9;
    for (int i = 0; i <= 10; ++i) {
        const double lr = poly_lr(1.0, i, 10, 0.9);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("L_src is non-negative for alpha >= 0") {
    Rng rng(11);
    CalibConfig calib;
    for (int rep = 0; rep < 10; ++rep) {
        auto logits = Td::zeros({1, 3, 2, 2});
        for (auto& v : logits.data()) v = rng.uniform(-3.0, 3.0);
        std::vector<int> labels(4);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(3));
        const double seg = seg_loss(logits, labels).item();
        const double ece = diff_ece_loss(logits, labels, calib).item();
        CHECK(seg >= 0.0);
        CHECK(ece >= 0.0);
        CHECK(seg + calib.alpha * ece >= 0.0);
    }
}
