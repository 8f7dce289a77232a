#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <random>
#include <set>

#include "sflow/metrics.hpp"
#include "vpq_oracle.hpp"

using namespace sflow;
using namespace sflow::testing;

namespace {

InstanceFrame frame(std::uint32_t h, std::uint32_t w, std::vector<std::int32_t> ids, std::int64_t t = 0) {
    InstanceFrame f = InstanceFrame::empty(Micros(t), h, w);
    f.ids = std::move(ids);
    return f;
}

}  // namespace

TEST(Iou, HandCountedCases) {
    std::vector<std::uint8_t> a{1, 1, 0, 1, 1, 0, 0, 0, 0};
    EXPECT_EQ(iou(a, a), 1.0);
    std::vector<std::uint8_t> b{0, 0, 1, 0, 0, 1, 1, 1, 1};
    EXPECT_EQ(iou(a, b), 0.0);
    // 2x2 squares at (0,0) and (0,1) on a 3x3 grid share 2 cells.
    std::vector<std::uint8_t> c{0, 1, 1, 0, 1, 1, 0, 0, 0};
    EXPECT_NEAR(iou(a, c), 2.0 / 6.0, 1e-15);
    std::vector<std::uint8_t> z(9, 0);
    EXPECT_EQ(iou(z, z), 1.0);
    EXPECT_EQ(iou(z, a), 0.0);
    EXPECT_THROW(iou(a, std::vector<std::uint8_t>(8)), std::invalid_argument);
}

TEST(Vpq, PerfectSequenceIsOne) {
    std::vector<InstanceFrame> gt{frame(2, 3, {0, 1, 1, 0, 1, 1}, 0), frame(2, 3, {1, 1, 0, 1, 1, 0}, 1)};
    const auto r = vpq(gt, gt);
    EXPECT_EQ(r.vpq, 1.0);
    EXPECT_EQ(r.pq, 1.0);
    EXPECT_EQ(r.sq, 1.0);
    EXPECT_EQ(r.rq, 1.0);
}

TEST(Vpq, OneThirdOverlapIsUnmatched) {
    std::vector<InstanceFrame> gt{frame(1, 4, {1, 1, 0, 0})};
    std::vector<InstanceFrame> pred{frame(1, 4, {0, 7, 7, 0})};
    const auto r = vpq(pred, gt);
    EXPECT_EQ(r.tp, 0u);
    EXPECT_EQ(r.fp, 1u);
    EXPECT_EQ(r.fn, 1u);
    EXPECT_EQ(r.vpq, 0.0);
}

TEST(Vpq, IdSwitchBecomesFalsePositiveAndNegative) {
    std::vector<InstanceFrame> gt{frame(1, 4, {1, 1, 0, 0}, 0), frame(1, 4, {1, 1, 0, 0}, 1)};
    std::vector<InstanceFrame> pred{frame(1, 4, {5, 5, 0, 0}, 0), frame(1, 4, {6, 6, 0, 0}, 1)};
    const auto r = vpq(pred, gt);
    EXPECT_EQ(r.tp, 1u);
    EXPECT_EQ(r.fp, 1u);
    EXPECT_EQ(r.fn, 1u);
    EXPECT_DOUBLE_EQ(r.vpq, 0.5);
}

TEST(Vpq, MisalignedSequencesRejected) {
    std::vector<InstanceFrame> a{frame(1, 2, {0, 1}, 0)};
    std::vector<InstanceFrame> b{frame(1, 2, {0, 1}, 5)};
    EXPECT_THROW(vpq(a, b), std::invalid_argument);
    EXPECT_THROW(vpq(a, {}), std::invalid_argument);
}

TEST(Vpq, MatchesBruteForceOracle) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 500; ++trial) {
        const std::uint32_t h = 2 + rng() % 5, w = 2 + rng() % 5;
        std::vector<InstanceFrame> gt, pred;
        for (int t = 0; t < 2; ++t) {
            gt.push_back(random_frame(rng, h, w, 3, t));
            pred.push_back(rng() % 2 ? jitter(rng, gt.back()) : random_frame(rng, h, w, 3, t));
        }
        const auto r = vpq(pred, gt);
        const Oracle o = brute_force(pred, gt);
        ASSERT_EQ(r.tp, o.tp) << "trial " << trial;
        ASSERT_EQ(r.fp, o.fp) << "trial " << trial;
        ASSERT_EQ(r.fn, o.fn) << "trial " << trial;
        ASSERT_EQ(r.vpq, o.vpq) << "trial " << trial;
        ASSERT_EQ(r.sq, o.sq) << "trial " << trial;
        ASSERT_EQ(r.rq, o.rq) << "trial " << trial;
        for (std::size_t t = 0; t < 2; ++t) {
            std::vector<std::uint8_t> pm = foreground(pred[t]), gm = foreground(gt[t]);
            std::size_t in = 0, un = 0;
            for (std::size_t k = 0; k < pm.size(); ++k) in += pm[k] && gm[k], un += pm[k] || gm[k];
            ASSERT_EQ(iou(pm, gm), un ? static_cast<double>(in) / un : 1.0);
        }
    }
}

TEST(Vpq, MatchesAreUniqueAndSwapIsSymmetric) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<InstanceFrame> gt, pred;
        for (int t = 0; t < 3; ++t) {
            gt.push_back(random_frame(rng, 6, 6, 3, t));
            pred.push_back(jitter(rng, gt.back()));
        }
        const auto a = vpq(pred, gt);
        const auto b = vpq(gt, pred);
        for (const auto& f : a.frames) {
            std::set<std::int32_t> ps, gs;
            for (auto [p, g] : f.matches) {
                EXPECT_TRUE(ps.insert(p).second);
                EXPECT_TRUE(gs.insert(g).second);
            }
        }
        EXPECT_NEAR(a.sq, b.sq, 1e-12);
        EXPECT_EQ(a.fp, b.fn);
        EXPECT_EQ(a.fn, b.fp);
    }
}

TEST(Vpq, SpuriousInstanceNeverIncreasesScore) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<InstanceFrame> gt, pred;
        for (int t = 0; t < 2; ++t) {
            gt.push_back(random_frame(rng, 6, 6, 3, t));
            pred.push_back(jitter(rng, gt.back()));
        }
        const double before = vpq(pred, gt).vpq;
        auto extra = pred;
        const std::size_t t = rng() % 2;
        bool added = false;
        for (std::size_t k = 0; k < extra[t].ids.size(); ++k) {
            if (extra[t].ids[k] == 0 && gt[t].ids[k] == 0 && rng() % 2) {
                extra[t].ids[k] = 99;
                added = true;
            }
        }
        if (!added) continue;
        EXPECT_LE(vpq(extra, gt).vpq, before + 1e-12) << "trial " << trial;
    }
}
