#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace tallpack;
using test::flat_mask;
using test::mask_set;
using test::mtv;
using test::tv;

namespace {

errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return errc::io_error;
}

} // namespace

TEST(TallMask, PerCoordinateExample) {
    // |tau_mtl - tau_t| = [0.5, 0.9, 0.0] against |tau_t| = [1.0, 0.1, 2.0]
    const auto m = build_tall_mask(tv({1.0f, 0.1f, -2.0f}), mtv({1.5f, 1.0f, -2.0f}, 2), 1.0);
    EXPECT_EQ(m.bits.at("w"), (std::vector<std::uint8_t>{1, 0, 1}));
}

TEST(TallMask, SingleTaskMergeSelectsEverything) {
    for (double lambda : {0.01, 0.2, 1.0, 50.0}) {
        const auto m = build_tall_mask(tv({0.0f, -3.0f, 1e-20f}), mtv({0.0f, -3.0f, 1e-20f}), lambda);
        EXPECT_EQ(m.count_ones(), 3u);
    }
}

TEST(TallMask, ZeroTaskVectorSelectsNothing) {
    const auto m = build_tall_mask(tv({0, 0, 0}), mtv({1, -2, 0.5f}, 2), 0.5);
    EXPECT_EQ(m.count_ones(), 0u);
}

TEST(TallMask, RejectsNonPositiveLambdaAndBadShapes) {
    EXPECT_EQ(code_of([] { build_tall_mask(tv({1}), mtv({1}), 0.0); }), errc::non_positive_lambda);
    EXPECT_EQ(code_of([] { build_tall_mask(tv({1}), mtv({1}), -1.0); }), errc::non_positive_lambda);
    EXPECT_EQ(code_of([] { build_tall_mask(tv({1}), mtv({1, 2}), 1.0); }), errc::incompatible_shapes);
}

TEST(OracleMask, BruteForceExamples) {
    // cost(m=0) = 1.0, cost(m=1) = 0.5
    EXPECT_EQ(oracle_mask(tv({1.0f}), mtv({1.5f})).bits.at("w")[0], 1);
    // cost(m=0) = 0.1, cost(m=1) = 0.9
    EXPECT_EQ(oracle_mask(tv({0.1f}), mtv({1.0f})).bits.at("w")[0], 0);
    // tie at 0.5 resolves to inclusion
    EXPECT_EQ(oracle_mask(tv({0.5f}), mtv({1.0f})).bits.at("w")[0], 1);
}

TEST(OracleMask, MatchesThresholdRuleIncludingTies) {
    std::mt19937 rng(1234);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> t(20000), mtl(20000);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = dist(rng);
        switch (i % 5) {
        case 0: mtl[i] = 2.0f * t[i]; break;       // |mtl - t| == |t|
        case 1: mtl[i] = 0.0f; break;              // |mtl - t| == |t|
        case 2: mtl[i] = t[i]; break;
        default: mtl[i] = dist(rng); break;
        }
    }
    const auto a = build_tall_mask(tv(t), mtv(mtl, 3), 1.0);
    const auto b = oracle_mask(tv(t), mtv(mtl, 3));
    EXPECT_EQ(a, b);
}

TEST(TallMask, MonotoneInLambda) {
    std::mt19937 rng(99);
    const auto t = tv(test::uniform_values(rng, 5000));
    const auto mtl = mtv(test::uniform_values(rng, 5000, -3.0f, 3.0f), 4);
    const std::vector<double> lambdas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0, 2.0};
    for (std::size_t i = 1; i < lambdas.size(); ++i) {
        const auto lo = build_tall_mask(t, mtl, lambdas[i - 1]);
        const auto hi = build_tall_mask(t, mtl, lambdas[i]);
        EXPECT_TRUE(hi.subset_of(lo));
        EXPECT_GE(lo.density(), hi.density());
    }
}

TEST(MaskAgreement, HandCountedExample) {
    // per-scalar sums [2, 1, 1]
    const auto set = mask_set({{1, 0, 1}, {1, 1, 0}, {0, 0, 0}});
    EXPECT_EQ(mask_agreement(set, 0).numerator, 0u);
    EXPECT_EQ(mask_agreement(set, 1).numerator, 2u);
    EXPECT_EQ(mask_agreement(set, 2).numerator, 1u);
    EXPECT_EQ(mask_agreement(set, 3).numerator, 0u);
    EXPECT_DOUBLE_EQ(mask_agreement(set, 1).value(), 2.0 / 3.0);
    EXPECT_EQ(mask_agreement(set, 1).denominator, 3u);
}

TEST(MaskAgreement, AllOnesConcentratesAtT) {
    const auto set = mask_set({{1, 1}, {1, 1}, {1, 1}, {1, 1}});
    EXPECT_DOUBLE_EQ(mask_agreement(set, 4).value(), 1.0);
    for (int n = 0; n < 4; ++n) EXPECT_EQ(mask_agreement(set, n).numerator, 0u);
}

TEST(MaskAgreement, SingleTaskMatchesDensity) {
    const auto set = mask_set({{1, 0, 1, 1, 0}});
    EXPECT_DOUBLE_EQ(mask_agreement(set, 1).value(), 0.6);
    EXPECT_DOUBLE_EQ(mask_agreement(set, 0).value(), 0.4);
}

TEST(MaskAgreement, OutOfRange) {
    const auto set = mask_set({{1, 0}, {0, 1}});
    EXPECT_EQ(code_of([&] { mask_agreement(set, 3); }), errc::out_of_range_n);
    EXPECT_EQ(code_of([&] { mask_agreement(set, -1); }), errc::out_of_range_n);
}

TEST(MaskAgreement, NumeratorsSumToTotal) {
    std::mt19937 rng(3);
    std::bernoulli_distribution coin(0.3);
    std::vector<std::vector<std::uint8_t>> raw(6, std::vector<std::uint8_t>(777));
    for (auto& m : raw)
        for (auto& b : m) b = coin(rng);
    const auto set = mask_set(raw);
    std::uint64_t total = 0;
    for (int n = 0; n <= 6; ++n) total += mask_agreement(set, n).numerator;
    EXPECT_EQ(total, 777u);
}

TEST(Taxonomy, HandCountedExample) {
    // sums [2, 1, 1, 0]
    const auto tax = classify_weights(mask_set({{1, 0, 1, 0}, {1, 1, 0, 0}}));
    EXPECT_EQ(tax.catastrophic(), 1u);
    EXPECT_EQ(tax.selfish(), 2u);
    EXPECT_EQ(tax.general(), 1u);
    EXPECT_EQ(tax.universal(), 1u);
    EXPECT_EQ(tax.total, 4u);
}

TEST(Taxonomy, AllZeroMasksAreCatastrophic) {
    const auto tax = classify_weights(mask_set({{0, 0, 0}, {0, 0, 0}}));
    EXPECT_EQ(tax.catastrophic(), 3u);
}

TEST(Taxonomy, ExportFormats) {
    const auto tax = classify_weights(mask_set({{1, 0, 1, 0}, {1, 1, 0, 0}}));
    EXPECT_EQ(tax.to_csv(), "n,count,fraction\n0,1,0.25\n1,2,0.5\n2,1,0.25\n");
    const auto j = tax.to_json();
    EXPECT_EQ(j["rows"].size(), 3u);
    EXPECT_EQ(j["rows"][1]["count"], 2);
    EXPECT_EQ(j["selfish"], 2);
}

TEST(TuneLambda, DisjointSupportsTieToLargestLambda) {
    SyntheticSpec spec{.P = 120, .T = 3, .seed = 8};
    const auto tasks = gen_disjoint_tasks(spec);
    const auto keys = TrainableKeySpec::all_trainable(tasks.pretrained);
    std::vector<TaskVector> vs;
    for (const auto& ft : tasks.finetuned) vs.push_back(compute_task_vector(ft, tasks.pretrained, keys));
    const auto mtl = sum_task_vectors(vs);
    for (std::size_t t = 0; t < vs.size(); ++t) {
        const auto choice =
            tune_lambda(tasks.pretrained, vs[t], mtl, default_lambda_grid(), l1_scorer(tasks.finetuned[t]));
        EXPECT_EQ(choice.lambda, 0.6);
        EXPECT_EQ(choice.score, 0.0);
    }
}

TEST(TuneLambda, SingleGridValue) {
    const auto pre = test::single("w", {0, 0});
    const auto choice = tune_lambda(pre, tv({1, 2}), mtv({3, 2}, 2), {0.35}, l1_scorer(pre));
    EXPECT_EQ(choice.lambda, 0.35);
}

TEST(TuneLambda, PicksBestScore) {
    // tau_t = [1, 1], others contribute [0.5, 3]; lambda 0.2 keeps both, 1.0 keeps only the first
    const auto pre = test::single("w", {0, 0});
    const auto target = test::single("w", {1.5f, 4.0f});
    const auto choice = tune_lambda(pre, tv({1, 1}), mtv({1.5f, 4.0f}, 2), {0.2, 1.0}, l1_scorer(target));
    EXPECT_EQ(choice.lambda, 0.2);
    EXPECT_EQ(choice.mask.count_ones(), 2u);
}

TEST(TuneLambda, GridErrors) {
    const auto pre = test::single("w", {0});
    EXPECT_EQ(code_of([&] { tune_lambda(pre, tv({1}), mtv({1}), {}, l1_scorer(pre)); }), errc::empty_grid);
    EXPECT_EQ(code_of([&] { tune_lambda(pre, tv({1}), mtv({1}), {0.2, 0.0}, l1_scorer(pre)); }),
              errc::non_positive_lambda);
}

TEST(TuneLambda, ParallelMatchesSerial) {
    std::mt19937 rng(17);
    const auto pre = test::single("w", test::uniform_values(rng, 3000));
    const auto t = tv(test::uniform_values(rng, 3000));
    const auto mtl = mtv(test::uniform_values(rng, 3000), 5);
    const auto target = test::single("w", test::uniform_values(rng, 3000));
    auto scorer = l1_scorer(target);
    scorer.serial = true;
    const auto serial = tune_lambda(pre, t, mtl, default_lambda_grid(), scorer);
    set_num_threads(4);
    scorer.serial = false;
    const auto parallel = tune_lambda(pre, t, mtl, default_lambda_grid(), scorer);
    set_num_threads(1);
    EXPECT_EQ(serial.lambda, parallel.lambda);
    EXPECT_EQ(serial.mask, parallel.mask);
}
