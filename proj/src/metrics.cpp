#include "sflow/metrics.hpp"

#include <stdexcept>
#include <string>
#include <tuple>

namespace sflow {

IouCounts iou_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("iou: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(gt.size()) + ")");
    }
    IouCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        c.intersection += p && g;
        c.union_ += p || g;
    }
    return c;
}

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) { return iou_counts(pred, gt).value(); }

std::vector<std::uint8_t> foreground(const InstanceFrame& f) {
    std::vector<std::uint8_t> m(f.ids.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = f.ids[i] > 0;
    return m;
}

double FrameTally::pq() const {
    const double denom = static_cast<double>(tp()) + 0.5 * static_cast<double>(fp + fn);
    return denom == 0.0 ? 1.0 : iou_sum / denom;
}

std::vector<std::tuple<std::int32_t, std::int32_t, double>> candidate_matches(const InstanceFrame& pred,
                                                                              const InstanceFrame& gt) {
    std::map<std::int32_t, std::size_t> pred_area, gt_area;
    std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> overlap;
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
        const std::int32_t p = pred.ids[i], g = gt.ids[i];
        if (p > 0) ++pred_area[p];
        if (g > 0) ++gt_area[g];
        if (p > 0 && g > 0) ++overlap[{p, g}];
    }
    std::vector<std::tuple<std::int32_t, std::int32_t, double>> out;
    for (const auto& [key, inter] : overlap) {
        const std::size_t uni = pred_area[key.first] + gt_area[key.second] - inter;
        const double v = static_cast<double>(inter) / static_cast<double>(uni);
        if (v > 0.5) out.emplace_back(key.first, key.second, v);
    }
    return out;
}

PanopticResult vpq(const std::vector<InstanceFrame>& pred, const std::vector<InstanceFrame>& gt) {
    if (pred.size() != gt.size()) {
        throw std::invalid_argument("vpq: sequence lengths differ (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(gt.size()) + ")");
    }
    PanopticResult r;
    std::map<std::int32_t, std::int32_t> gt_to_pred, pred_to_gt;
    double iou_total = 0.0, pq_sum = 0.0;
    std::size_t scored_frames = 0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        const InstanceFrame& p = pred[t];
        const InstanceFrame& g = gt[t];
        if (p.timestamp != g.timestamp || p.height != g.height || p.width != g.width) {
            throw std::invalid_argument("vpq: frame " + std::to_string(t) + " is misaligned");
        }
        std::map<std::int32_t, bool> pred_ids, gt_ids;
        for (std::int32_t v : p.ids)
            if (v > 0) pred_ids[v] = false;
        for (std::int32_t v : g.ids)
            if (v > 0) gt_ids[v] = false;

        FrameTally tally;
        for (const auto& [pid, gid, v] : candidate_matches(p, g)) {
            if (pred_ids[pid] || gt_ids[gid]) throw std::logic_error("vpq: instance matched twice");
            const auto known_gt = gt_to_pred.find(gid);
            const auto known_pred = pred_to_gt.find(pid);
            const bool consistent = (known_gt == gt_to_pred.end() || known_gt->second == pid) &&
                                    (known_pred == pred_to_gt.end() || known_pred->second == gid);
            if (!consistent) continue;
            pred_ids[pid] = gt_ids[gid] = true;
            gt_to_pred.emplace(gid, pid);
            pred_to_gt.emplace(pid, gid);
            tally.matches.emplace_back(pid, gid);
            tally.iou_sum += v;
        }
        for (const auto& [id, matched] : pred_ids) tally.fp += !matched;
        for (const auto& [id, matched] : gt_ids) tally.fn += !matched;

        r.tp += tally.tp();
        r.fp += tally.fp;
        r.fn += tally.fn;
        iou_total += tally.iou_sum;
        if (tally.tp() + tally.fp + tally.fn > 0) {
            pq_sum += tally.pq();
            ++scored_frames;
        }
        r.frames.push_back(std::move(tally));
    }
    const double denom = static_cast<double>(r.tp) + 0.5 * static_cast<double>(r.fp + r.fn);
    if (denom > 0) {
        r.rq = static_cast<double>(r.tp) / denom;
        r.sq = r.tp > 0 ? iou_total / static_cast<double>(r.tp) : 0.0;
        r.pq = iou_total / denom;
    }
    r.vpq = scored_frames > 0 ? pq_sum / static_cast<double>(scored_frames) : 1.0;
    return r;
}

}  // namespace sflow
