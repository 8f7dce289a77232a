#pragma once

// Random instance sequences and an exhaustive VPQ reference, shared by the
// metric unit tests and the acceptance runner.

#include <algorithm>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "sflow/metrics.hpp"

namespace sflow::testing {

inline InstanceFrame random_frame(std::mt19937_64& rng, std::uint32_t h, std::uint32_t w, int max_instances, std::int64_t t) {
    InstanceFrame f = InstanceFrame::empty(Micros(t), h, w);
    const int n = static_cast<int>(rng() % (max_instances + 1));
    // Random rectangles painted in order; ids drawn from a small pool so
    // that tracks recur across frames.
    for (int k = 0; k < n; ++k) {
        const auto id = static_cast<std::int32_t>(1 + rng() % 4);
        const std::uint32_t r0 = rng() % h, c0 = rng() % w;
        const std::uint32_t r1 = r0 + rng() % (h - r0), c1 = c0 + rng() % (w - c0);
        for (std::uint32_t r = r0; r <= r1; ++r)
            for (std::uint32_t c = c0; c <= c1; ++c) f.ids[r * w + c] = id;
    }
    return f;
}

/// Perturbs a frame so predictions overlap but differ from the truth.
inline InstanceFrame jitter(std::mt19937_64& rng, const InstanceFrame& src) {
    InstanceFrame f = src;
    for (auto& v : f.ids) {
        const auto u = rng() % 10;
        if (u == 0) v = 0;
        else if (u == 1) v = static_cast<std::int32_t>(1 + rng() % 4);
    }
    if (rng() % 3 == 0) {
        // relabel to create id switches
        const std::int32_t a = 1 + rng() % 4, b = 1 + rng() % 4;
        for (auto& v : f.ids) v = v == a ? b : (v == b ? a : v);
    }
    return f;
}

struct Oracle {
    double vpq = 0, sq = 0, rq = 0;
    std::size_t tp = 0, fp = 0, fn = 0;
};

/// Exhaustive reference: per frame, enumerate every partial injective
/// matching, keep those whose pairs all have IoU > 0.5 and agree with the
/// track history in both directions, pick the largest.
inline Oracle brute_force(const std::vector<InstanceFrame>& pred, const std::vector<InstanceFrame>& gt) {
    Oracle o;
    std::vector<std::pair<std::int32_t, std::int32_t>> history;
    double iou_total = 0, pq_sum = 0;
    int scored = 0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        std::set<std::int32_t> ps, gs;
        for (auto v : pred[t].ids) if (v) ps.insert(v);
        for (auto v : gt[t].ids) if (v) gs.insert(v);
        std::vector<std::int32_t> pv(ps.begin(), ps.end()), gv(gs.begin(), gs.end());
        auto pair_iou = [&](std::int32_t p, std::int32_t g) {
            std::size_t in = 0, un = 0;
            for (std::size_t k = 0; k < pred[t].ids.size(); ++k) {
                const bool a = pred[t].ids[k] == p, b = gt[t].ids[k] == g;
                in += a && b;
                un += a || b;
            }
            return static_cast<double>(in) / static_cast<double>(un);
        };
        auto allowed = [&](std::int32_t p, std::int32_t g) {
            for (auto [hp, hg] : history)
                if ((hg == g && hp != p) || (hp == p && hg != g)) return false;
            return pair_iou(p, g) > 0.5;
        };
        std::vector<std::pair<std::int32_t, std::int32_t>> best, cur;
        std::vector<bool> used(gv.size(), false);
        std::function<void(std::size_t)> rec = [&](std::size_t i) {
            if (i == pv.size()) {
                if (cur.size() > best.size()) best = cur;
                return;
            }
            rec(i + 1);
            for (std::size_t j = 0; j < gv.size(); ++j) {
                if (used[j] || !allowed(pv[i], gv[j])) continue;
                used[j] = true;
                cur.emplace_back(pv[i], gv[j]);
                rec(i + 1);
                cur.pop_back();
                used[j] = false;
            }
        };
        rec(0);
        double sum = 0;
        for (auto [p, g] : best) {
            sum += pair_iou(p, g);
            if (std::find(history.begin(), history.end(), std::pair{p, g}) == history.end()) history.emplace_back(p, g);
        }
        const std::size_t tp = best.size(), fp = pv.size() - tp, fn = gv.size() - tp;
        o.tp += tp;
        o.fp += fp;
        o.fn += fn;
        iou_total += sum;
        if (tp + fp + fn > 0) {
            pq_sum += sum / (tp + 0.5 * fp + 0.5 * fn);
            ++scored;
        }
    }
    const double denom = o.tp + 0.5 * (o.fp + o.fn);
    o.rq = denom > 0 ? o.tp / denom : 1.0;
    o.sq = denom > 0 ? (o.tp ? iou_total / o.tp : 0.0) : 1.0;
    o.vpq = scored ? pq_sum / scored : 1.0;
    return o;
}

}  // namespace sflow::testing
