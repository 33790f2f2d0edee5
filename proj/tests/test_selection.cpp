#include <doctest.h>

#include <cmath>

#include "calseg/rng.hpp"
#include "calseg/source_stage.hpp"
#include "calseg/target_stage.hpp"

using namespace calseg;

TEST_CASE("select_source_checkpoint") {
    SUBCASE("single checkpoint selects itself") {
        std::vector<PoolEntry> pool = {{1, {0.3, 0.5, 0.1}}};
        CHECK(select_source_checkpoint(pool) == 0);
    }
    SUBCASE("derived two-entry case") {
        // A: 0.1+0.2+0.05 = 0.35, B: 0.12+0.15+0.05 = 0.32 -> B
        std::vector<PoolEntry> pool = {{1, {0.1, 0.2, 0.05}}, {2, {0.12, 0.15, 0.05}}};
        CHECK(select_source_checkpoint(pool) == 1);
    }
    SUBCASE("constant offset leaves the argmin unchanged") {
        Rng rng(1);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<PoolEntry> pool;
            for (int e = 1; e <= 12; ++e) {
                EceStats s;
                s.min = rng.uniform(0.0, 0.2);
                s.mean = s.min + rng.uniform(0.0, 0.2);
                s.max = s.mean + rng.uniform(0.0, 0.2);
                pool.push_back({e, s});
            }
            const auto base = select_source_checkpoint(pool);
            const double c = rng.uniform(0.0, 5.0);
            auto shifted = pool;
            for (auto& entry : shifted) {
                entry.val_ece.mean += c;
                entry.val_ece.max += c;
                entry.val_ece.min += c;
            }
            CHECK(select_source_checkpoint(shifted) == base);
        }
    }
    SUBCASE("ties break to the earliest epoch") {
        std::vector<PoolEntry> pool = {{3, {0.1, 0.1, 0.1}}, {1, {0.1, 0.1, 0.1}},
                                       {2, {0.1, 0.1, 0.1}}};
        CHECK(select_source_checkpoint(pool) == 1);  // epoch 1
    }
    SUBCASE("brute-force agreement on random pools") {
        Rng rng(2);
        for (int rep = 0; rep < 200; ++rep) {
            const int n = 1 + static_cast<int>(rng.uniform_int(30));
            std::vector<PoolEntry> pool;
            for (int e = 0; e < n; ++e) {
                EceStats s;
                s.min = rng.uniform(0.0, 0.3);
                s.mean = s.min + rng.uniform(0.0, 0.3);
                s.max = s.mean + rng.uniform(0.0, 0.3);
                // occasional exact duplicates to exercise tie-breaking
                if (e > 0 && rng.bernoulli(0.15)) s = pool[static_cast<std::size_t>(e - 1)].val_ece;
                pool.push_back({e + 1, s});
            }
            // exhaustive scan
            std::size_t best = 0;
            for (std::size_t i = 1; i < pool.size(); ++i) {
                const double a = pool[i].val_ece.criterion();
                const double b = pool[best].val_ece.criterion();
                if (a < b || (a == b && pool[i].epoch < pool[best].epoch)) best = i;
            }
            CHECK(select_source_checkpoint(pool) == best);
        }
    }
    SUBCASE("empty pool is an error") {
        CHECK_THROWS_AS(select_source_checkpoint({}), Error);
    }
}

TEST_CASE("select_min_entropy") {
    CHECK(select_min_entropy({0.9, 0.4, 0.6}) == 1);  // the epoch-2 checkpoint
    CHECK(select_min_entropy({0.5}) == 0);
    CHECK(select_min_entropy({0.3, 0.3, 0.3}) == 0);  // earliest on ties
    CHECK_THROWS_AS(select_min_entropy({}), Error);
    SUBCASE("invariant to adding a constant") {
        Rng rng(3);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> ent;
            for (int i = 0; i < 10; ++i) ent.push_back(rng.uniform(0.0, 2.0));
            const auto base = select_min_entropy(ent);
            const double c = rng.uniform(-0.5, 3.0);
            auto shifted = ent;
            for (auto& v : shifted) v += c;
            CHECK(select_min_entropy(shifted) == base);
        }
    }
}

TEST_CASE("adjusted_confidence") {
    CHECK(adjusted_confidence(0.7f, 0.0f) == doctest::Approx(0.7f));
    CHECK(adjusted_confidence(0.0f, 0.3f) == doctest::Approx(0.0f));
    CHECK(adjusted_confidence(0.5f, 0.2f) == doctest::Approx(0.4f));
}

TEST_CASE("compute_class_thresholds") {
    SUBCASE("derived ranked-list case: delta=0.15, m=10 -> index 1") {
        std::vector<float> conf = {0.9f, 0.8f, 0.7f, 0.6f, 0.5f, 0.45f, 0.4f, 0.3f, 0.2f, 0.1f};
        std::vector<int> pred(10, 0);
        auto th = compute_class_thresholds(conf, pred, 1, 0.15);
        CHECK(th.xi[0] == doctest::Approx(0.8).epsilon(1e-7));
    }
    SUBCASE("delta = 1 takes the smallest element") {
        std::vector<float> conf = {0.9f, 0.5f, 0.7f};
        std::vector<int> pred(3, 0);
        auto th = compute_class_thresholds(conf, pred, 1, 1.0);
        CHECK(th.xi[0] == doctest::Approx(0.5).epsilon(1e-7));
    }
    SUBCASE("classes with no pixels get xi = 1") {
        std::vector<float> conf = {0.9f, 0.5f};
        std::vector<int> pred = {0, 0};
        auto th = compute_class_thresholds(conf, pred, 3, 0.5);
        CHECK(th.xi[1] == 1.0);
        CHECK(th.xi[2] == 1.0);
    }
    SUBCASE("two classes with equal thresholds share the weight evenly") {
        std::vector<float> conf = {0.8f, 0.8f};
        std::vector<int> pred = {0, 1};
        auto th = compute_class_thresholds(conf, pred, 2, 1.0);
        CHECK(th.weight[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(th.weight[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("weights sum to 1") {
        Rng rng(4);
        for (int rep = 0; rep < 20; ++rep) {
            const int C = 2 + static_cast<int>(rng.uniform_int(6));
            std::vector<float> conf;
            std::vector<int> pred;
            for (int i = 0; i < 100; ++i) {
                conf.push_back(static_cast<float>(rng.uniform()));
                pred.push_back(static_cast<int>(rng.uniform_int(C)));
            }
            auto th = compute_class_thresholds(conf, pred, C, 0.15);
            double s = 0;
            for (double w : th.weight) s += w;
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
    SUBCASE("empty input is an error") {
        CHECK_THROWS_AS(compute_class_thresholds({}, {}, 2, 0.5), Error);
    }
}

TEST_CASE("pseudo-label ratio invariant (distinct confidences)") {
    Rng rng(5);
    for (double delta : {0.15, 0.5, 1.0}) {
        for (int rep = 0; rep < 50; ++rep) {
            const int C = 2 + static_cast<int>(rng.uniform_int(5));
            const int n = 50 + static_cast<int>(rng.uniform_int(400));
            std::vector<float> conf;
            std::vector<int> pred;
            conf.reserve(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                // strictly distinct confidences
                conf.push_back(static_cast<float>((i + 1) + rng.uniform(0.1, 0.9)) /
                               static_cast<float>(n + 2));
                pred.push_back(static_cast<int>(rng.uniform_int(C)));
            }
            auto th = compute_class_thresholds(conf, pred, C, delta);
            // count pixels strictly above the class threshold
            std::vector<std::int64_t> member(static_cast<std::size_t>(C), 0);
            std::vector<std::int64_t> labeled(static_cast<std::size_t>(C), 0);
            for (int i = 0; i < n; ++i) {
                const auto c = static_cast<std::size_t>(pred[static_cast<std::size_t>(i)]);
                ++member[c];
                if (conf[static_cast<std::size_t>(i)] > th.xi[c]) ++labeled[c];
            }
            for (int c = 0; c < C; ++c) {
                const auto ci = static_cast<std::size_t>(c);
                if (member[ci] == 0) {
                    CHECK(labeled[ci] == 0);
                    continue;
                }
                const auto expect = std::min<std::int64_t>(
                    static_cast<std::int64_t>(std::floor(delta * static_cast<double>(member[ci]))),
                    member[ci] - 1);
                CHECK(labeled[ci] == expect);
            }
        }
    }
}

TEST_CASE("assign_pseudo_labels") {
    SUBCASE("below both thresholds leaves 255") {
        // global thresholds high; image confidences low
        ClassThresholds global;
        global.xi = {0.99, 0.99};
        global.weight = {0.5, 0.5};
        std::vector<int> pred = {0, 0, 1, 1};
        std::vector<float> conf = {0.5f, 0.4f, 0.3f, 0.2f};
        // local: delta 0.5 on 2 pixels/class -> index min(1,1)=1 -> xi=smaller value
        auto map = assign_pseudo_labels(pred, conf, 1, 4, global, 2, 0.5);
        // pixels at the local threshold value itself do not pass (strict >)
        CHECK(map.labels[0] == 0);    // 0.5 > local xi 0.4
        CHECK(map.labels[1] == 255);  // 0.4 is not > 0.4
        CHECK(map.labels[2] == 1);    // 0.3 > 0.2
        CHECK(map.labels[3] == 255);
        CHECK(map.provenance[0] == static_cast<std::uint8_t>(PseudoProvenance::local_rule));
    }
    SUBCASE("single-image dataset: global and local thresholds coincide") {
        Rng rng(6);
        std::vector<int> pred;
        std::vector<float> conf;
        for (int i = 0; i < 64; ++i) {
            pred.push_back(static_cast<int>(rng.uniform_int(3)));
            conf.push_back(static_cast<float>(rng.uniform()));
        }
        auto global = compute_class_thresholds(conf, pred, 3, 0.15);
        auto map = assign_pseudo_labels(pred, conf, 8, 8, global, 3, 0.15);
        // fusion equals the plain rule: every labeled pixel passes the global
        // threshold, and provenance is 'both' everywhere labeled
        for (std::size_t i = 0; i < map.labels.size(); ++i) {
            if (map.labels[i] == 255) continue;
            CHECK(map.provenance[i] == static_cast<std::uint8_t>(PseudoProvenance::both));
            CHECK(conf[i] > global.xi[map.labels[i]]);
        }
    }
    SUBCASE("delta = 1 labels all but the per-class minimum") {
        std::vector<int> pred = {0, 0, 0, 0};
        std::vector<float> conf = {0.9f, 0.7f, 0.5f, 0.3f};
        auto global = compute_class_thresholds(conf, pred, 1, 1.0);
        auto map = assign_pseudo_labels(pred, conf, 1, 4, global, 1, 1.0);
        CHECK(map.labels[0] == 0);
        CHECK(map.labels[1] == 0);
        CHECK(map.labels[2] == 0);
        CHECK(map.labels[3] == 255);  // the strict > rule excludes the minimum
        CHECK(map.labeled_count() == 3);
    }
    SUBCASE("lower ECEhat never decreases the pixels passing a fixed threshold set") {
        Rng rng(7);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<int> pred;
            std::vector<float> raw;
            for (int i = 0; i < 64; ++i) {
                pred.push_back(static_cast<int>(rng.uniform_int(3)));
                raw.push_back(static_cast<float>(rng.uniform()));
            }
            ClassThresholds fixed;
            fixed.xi = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
            fixed.weight = {1.0 / 3, 1.0 / 3, 1.0 / 3};
            const float e_hi = 0.5f, e_lo = 0.2f;
            auto passes = [&](float e) {
                int n = 0;
                for (int i = 0; i < 64; ++i) {
                    if (adjusted_confidence(raw[static_cast<std::size_t>(i)], e) >
                        fixed.xi[static_cast<std::size_t>(pred[static_cast<std::size_t>(i)])]) {
                        ++n;
                    }
                }
                return n;
            };
            CHECK(passes(e_lo) >= passes(e_hi));
        }
    }
}

TEST_CASE("miou") {
    SUBCASE("perfect prediction gives 1") {
        std::vector<int> pred = {0, 1, 2, 1};
        std::vector<std::uint8_t> labels = {0, 1, 2, 1};
        auto r = miou(pred, labels, 3);
        CHECK(r.mean == doctest::Approx(1.0));
        for (int c = 0; c < 3; ++c) CHECK(r.per_class[static_cast<std::size_t>(c)] == 1.0);
    }
    SUBCASE("disjoint single-class prediction gives 0") {
        std::vector<int> pred = {0, 0};
        std::vector<std::uint8_t> labels = {1, 1};
        auto r = miou(pred, labels, 2);
        CHECK(r.per_class[0] == 0.0);
        CHECK(r.per_class[1] == 0.0);
        CHECK(r.mean == 0.0);
    }
    SUBCASE("derived 4-pixel case: IoU = 1/3") {
        // class 0: predicted {a,b}, truth {b,c} -> TP=1 (b), FP=1 (a), FN=1 (c)
        std::vector<int> pred = {0, 0, 1, 1};
        std::vector<std::uint8_t> labels = {1, 0, 0, 1};
        auto r = miou(pred, labels, 2);
        CHECK(r.per_class[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
    SUBCASE("255 pixels are excluded; absent classes do not enter the mean") {
        std::vector<int> pred = {0, 0, 1};
        std::vector<std::uint8_t> labels = {0, 255, 1};
        auto r = miou(pred, labels, 4);
        CHECK(r.present[0]);
        CHECK(r.present[1]);
        CHECK_FALSE(r.present[2]);
        CHECK_FALSE(r.present[3]);
        CHECK(r.mean == doctest::Approx(1.0));
    }
}
