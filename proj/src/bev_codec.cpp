#include "sflow/bev_codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include "json.hpp"
#include "sflow/pgm.hpp"

namespace sflow {

CodecParams CodecParams::make(std::uint32_t channels, std::mt19937_64& rng) {
    CodecParams p;
    p.lidar_in = Conv::same(1, channels, 3, rng);
    p.lidar_out = Conv::same(channels, channels, 3, rng);
    p.camera_in = Conv::same(1, channels, 3, rng);
    p.camera_out = Conv::same(channels, channels, 3, rng);
    p.decoder_up = make_resample_conv(ResampleFactor::up4, channels, channels, rng);
    p.trunk = Conv::same(channels, channels, 3, rng);
    p.seg_head = Conv::same(channels, 2, 3, rng);
    p.center_head = Conv::same(channels, 1, 3, rng);
    p.offset_head = Conv::same(channels, 2, 3, rng);
    p.flow_head = Conv::same(channels, 2, 3, rng);
    return p;
}

void CodecParams::collect(ParamList& out, const std::string& prefix) const {
    lidar_in.collect(out, prefix + ".lidar_in");
    lidar_out.collect(out, prefix + ".lidar_out");
    camera_in.collect(out, prefix + ".camera_in");
    camera_out.collect(out, prefix + ".camera_out");
    decoder_up.collect(out, prefix + ".decoder_up");
    trunk.collect(out, prefix + ".trunk");
    seg_head.collect(out, prefix + ".seg_head");
    center_head.collect(out, prefix + ".center_head");
    offset_head.collect(out, prefix + ".offset_head");
    flow_head.collect(out, prefix + ".flow_head");
}

Tensor encode_modality(const CodecParams& params, const Tensor& raw, Modality modality) {
    switch (modality) {
        case Modality::lidar: return params.lidar_out(tanh(params.lidar_in(raw)));
        case Modality::camera: return params.camera_out(tanh(params.camera_in(raw)));
        case Modality::fused: break;
    }
    throw std::invalid_argument("encode_modality: no encoder for modality " + to_string(modality));
}

DecodedFrame decode(const CodecParams& params, const Tensor& state) {
    const Tensor full = tanh(resample(state, ResampleFactor::up4, params.decoder_up));
    const Tensor feat = tanh(params.trunk(full));
    return DecodedFrame{params.seg_head(feat), sigmoid(params.center_head(feat)), params.offset_head(feat),
                        params.flow_head(feat)};
}

Targets make_targets(const InstanceFrame& gt, double sigma) {
    const std::uint32_t h = gt.height, w = gt.width;
    const std::size_t n = gt.cells();
    Targets t;
    t.timestamp = gt.timestamp;
    t.seg.resize(n);
    t.centerness = Tensor::zeros({1, 1, h, w});
    t.offset = Tensor::zeros({1, 2, h, w});
    t.flow = Tensor::zeros({1, 2, h, w});
    t.foreground = Tensor::zeros({1, 1, h, w});

    std::map<std::int32_t, std::tuple<double, double, std::size_t>> sums;  // x, y, count
    for (std::size_t k = 0; k < n; ++k) {
        if (gt.ids[k] <= 0) continue;
        auto& [sx, sy, c] = sums[gt.ids[k]];
        sx += static_cast<double>(k % w);
        sy += static_cast<double>(k / w);
        ++c;
    }
    std::map<std::int32_t, std::pair<double, double>> centers;
    for (const auto& [id, s] : sums) {
        const auto& [sx, sy, c] = s;
        centers[id] = {sx / static_cast<double>(c), sy / static_cast<double>(c)};
    }
    auto cen = t.centerness.mutable_data();
    auto off = t.offset.mutable_data();
    auto flow = t.flow.mutable_data();
    auto fg = t.foreground.mutable_data();
    for (std::size_t k = 0; k < n; ++k) {
        const double x = static_cast<double>(k % w), y = static_cast<double>(k / w);
        double best = 0.0;
        for (const auto& [id, c] : centers) {
            const double d2 = (x - c.first) * (x - c.first) + (y - c.second) * (y - c.second);
            best = std::max(best, std::exp(-d2 / (2 * sigma * sigma)));
        }
        cen[k] = best;
        if (gt.ids[k] <= 0) continue;
        const auto& c = centers[gt.ids[k]];
        t.seg[k] = 1;
        fg[k] = 1.0;
        off[k] = c.first - x;
        off[n + k] = c.second - y;
        flow[k] = gt.flow_x(k);
        flow[n + k] = gt.flow_y(k);
    }
    return t;
}

LossBreakdown total_loss(const std::vector<DecodedFrame>& decoded, const std::vector<Targets>& targets,
                         const Tensor& kld_total, const LossWeights& weights) {
    if (decoded.size() != targets.size()) {
        throw std::invalid_argument("total_loss: " + std::to_string(decoded.size()) + " decoded frames vs " +
                                    std::to_string(targets.size()) + " label frames");
    }
    const double class_weights[2] = {1.0, weights.foreground_class_weight};
    auto regress = [&](const Tensor& p, const Tensor& t, const Tensor& m) {
        return weights.regression == RegressionLoss::l1 ? masked_l1(p, t, m) : masked_l2(p, t, m);
    };
    Tensor seg = Tensor::scalar(0.0), spatial = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        const DecodedFrame& d = decoded[i];
        const Targets& t = targets[i];
        if (d.seg_logits.shape().h != t.centerness.shape().h || d.seg_logits.shape().w != t.centerness.shape().w) {
            throw ShapeError("total_loss: frame " + std::to_string(i) + " extents " + d.seg_logits.shape().str() +
                             " vs labels " + t.centerness.shape().str());
        }
        seg = add(seg, cross_entropy_channel(d.seg_logits, t.seg, class_weights));
        const Tensor all = Tensor::full(t.foreground.shape(), 1.0);
        spatial = add(spatial, add(regress(d.centerness, t.centerness, all),
                                   add(regress(d.offset, t.offset, t.foreground), regress(d.flow, t.flow, t.foreground))));
    }
    const Tensor kld = kld_total.defined() ? kld_total : Tensor::scalar(0.0);

    LossBreakdown out;
    out.seg = seg.item();
    out.spatial = spatial.item();
    out.kld = kld.item();
    if (weights.uncertainty()) {
        Tensor total = Tensor::scalar(0.0);
        const Tensor* terms[3] = {&seg, &spatial, &kld};
        for (std::uint32_t i = 0; i < 3; ++i) {
            const Tensor s = slice_channels(weights.log_vars, i, 1);
            total = add(total, add(mul(exp(scale(s, -1.0)), *terms[i]), s));
        }
        out.total = total;
    } else {
        out.total = add(add(scale(seg, weights.seg), scale(spatial, weights.spatial)), scale(kld, weights.kld));
    }
    out.total_value = out.total.item();
    return out;
}

InstanceFrame instance_postprocess(const DecodedFrame& frame, Micros timestamp, const PostprocessConfig& config,
                                   std::uint32_t batch) {
    const Shape& s = frame.seg_logits.shape();
    const std::uint32_t h = s.h, w = s.w;
    const std::size_t n = s.plane();
    InstanceFrame out = InstanceFrame::empty(timestamp, h, w);
    const auto seg = frame.seg_logits.data();
    const auto cen = frame.centerness.data();
    const auto off = frame.offset.data();
    const auto flow = frame.flow.data();
    const std::size_t seg_base = std::size_t{batch} * 2 * n, one_base = std::size_t{batch} * n;

    std::vector<std::pair<double, double>> centers;  // (x, y)
    const int r = static_cast<int>(config.nms_radius);
    for (std::uint32_t y = 0; y < h; ++y) {
        for (std::uint32_t x = 0; x < w; ++x) {
            const std::size_t k = std::size_t{y} * w + x;
            const double v = cen[one_base + k];
            if (!(v > config.threshold)) continue;
            bool peak = true;
            for (int dy = -r; dy <= r && peak; ++dy) {
                for (int dx = -r; dx <= r; ++dx) {
                    const int yy = static_cast<int>(y) + dy, xx = static_cast<int>(x) + dx;
                    if ((dx == 0 && dy == 0) || yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) continue;
                    const std::size_t kk = static_cast<std::size_t>(yy) * w + xx;
                    const double u = cen[one_base + kk];
                    // Plateaus keep only their first cell in raster order.
                    if (u > v || (u == v && kk < k)) {
                        peak = false;
                        break;
                    }
                }
            }
            if (peak) centers.emplace_back(x, y);
        }
    }
    if (centers.empty()) return out;

    std::vector<std::int32_t> raw(n, 0);
    std::vector<std::size_t> sizes(centers.size(), 0);
    for (std::size_t k = 0; k < n; ++k) {
        if (!(seg[seg_base + n + k] > seg[seg_base + k])) continue;
        const double px = static_cast<double>(k % w) + off[seg_base + k];
        const double py = static_cast<double>(k / w) + off[seg_base + n + k];
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centers.size(); ++c) {
            const double d = (px - centers[c].first) * (px - centers[c].first) + (py - centers[c].second) * (py - centers[c].second);
            if (d < best_d) best_d = d, best = c;
        }
        raw[k] = static_cast<std::int32_t>(best + 1);
        ++sizes[best];
    }
    std::vector<std::int32_t> relabel(centers.size() + 1, 0);
    std::int32_t next = 1;
    for (std::size_t c = 0; c < centers.size(); ++c)
        if (sizes[c] > 0) relabel[c + 1] = next++;
    for (std::size_t k = 0; k < n; ++k) {
        out.ids[k] = relabel[raw[k]];
        if (out.ids[k] > 0) {
            out.flow[k] = flow[seg_base + k];
            out.flow[n + k] = flow[seg_base + n + k];
        }
    }
    return out;
}

namespace {

struct InstanceSummary {
    double x = 0, y = 0, fx = 0, fy = 0;
    std::size_t count = 0;
};

std::map<std::int32_t, InstanceSummary> summarize(const InstanceFrame& f) {
    std::map<std::int32_t, InstanceSummary> out;
    for (std::size_t k = 0; k < f.cells(); ++k) {
        if (f.ids[k] <= 0) continue;
        auto& s = out[f.ids[k]];
        s.x += static_cast<double>(k % f.width);
        s.y += static_cast<double>(k / f.width);
        s.fx += f.flow_x(k);
        s.fy += f.flow_y(k);
        ++s.count;
    }
    for (auto& [id, s] : out) {
        const double c = static_cast<double>(s.count);
        s.x /= c, s.y /= c, s.fx /= c, s.fy /= c;
    }
    return out;
}

}  // namespace

void link_instances(std::vector<InstanceFrame>& frames, Micros label_interval, double max_distance) {
    if (frames.empty()) return;
    std::int32_t next_id = 1;
    for (std::int32_t v : frames[0].ids) next_id = std::max(next_id, v + 1);
    for (std::size_t f = 1; f < frames.size(); ++f) {
        const double scale_factor = static_cast<double>((frames[f].timestamp - frames[f - 1].timestamp).count) /
                                    static_cast<double>(label_interval.count);
        const auto prev = summarize(frames[f - 1]);
        const auto cur = summarize(frames[f]);
        std::vector<std::tuple<double, std::int32_t, std::int32_t>> pairs;
        for (const auto& [pid, p] : prev) {
            const double wx = p.x + p.fx * scale_factor, wy = p.y + p.fy * scale_factor;
            for (const auto& [cid, c] : cur) {
                const double d = std::hypot(c.x - wx, c.y - wy);
                if (d <= max_distance) pairs.emplace_back(d, pid, cid);
            }
        }
        std::sort(pairs.begin(), pairs.end());
        std::map<std::int32_t, std::int32_t> assigned;  // current id -> linked id
        std::map<std::int32_t, bool> used_prev;
        for (const auto& [d, pid, cid] : pairs) {
            if (assigned.count(cid) || used_prev[pid]) continue;
            assigned[cid] = pid;
            used_prev[pid] = true;
        }
        for (const auto& [cid, c] : cur)
            if (!assigned.count(cid)) assigned[cid] = next_id++;
        for (auto& v : frames[f].ids)
            if (v > 0) v = assigned[v];
        for (const auto& [cid, id] : assigned) next_id = std::max(next_id, id + 1);
    }
}

namespace {

void write_field(const std::filesystem::path& dir, const std::string& stem, const std::string& field, Micros t,
                 std::uint32_t h, std::uint32_t w, const std::vector<double>& values, double scale, double offset,
                 std::uint32_t maxval) {
    GrayImage img{w, h, maxval, {}};
    img.pixels.reserve(values.size());
    for (double v : values) {
        const double q = std::round((v - offset) / scale);
        img.pixels.push_back(static_cast<std::uint16_t>(std::clamp(q, 0.0, static_cast<double>(maxval))));
    }
    const std::string base = stem + "_" + field;
    write_pgm(dir / (base + ".pgm"), img);
    const nlohmann::json side{{"timestamp_us", t.count}, {"field", field}, {"scale", scale}, {"offset", offset}};
    std::ofstream(dir / (base + ".json")) << side.dump() << '\n';
}

}  // namespace

void export_frame(const DecodedFrame& frame, const InstanceFrame& instances, const std::filesystem::path& dir,
                  const std::string& stem) {
    std::filesystem::create_directories(dir);
    const std::uint32_t h = instances.height, w = instances.width;
    const std::size_t n = instances.cells();
    const auto seg = frame.seg_logits.data();
    std::vector<double> fg(n), cen(n), ox(n), oy(n), fx(n), fy(n), ids(n);
    for (std::size_t k = 0; k < n; ++k) {
        fg[k] = 1.0 / (1.0 + std::exp(seg[k] - seg[n + k]));
        cen[k] = frame.centerness[k];
        ox[k] = frame.offset[k];
        oy[k] = frame.offset[n + k];
        fx[k] = frame.flow[k];
        fy[k] = frame.flow[n + k];
        ids[k] = instances.ids[k];
    }
    const Micros t = instances.timestamp;
    constexpr double unit = 1.0 / 255.0, vec = 16.0 / 255.0;
    write_field(dir, stem, "foreground", t, h, w, fg, unit, 0.0, 255);
    write_field(dir, stem, "centerness", t, h, w, cen, unit, 0.0, 255);
    write_field(dir, stem, "offset_x", t, h, w, ox, vec, -8.0, 255);
    write_field(dir, stem, "offset_y", t, h, w, oy, vec, -8.0, 255);
    write_field(dir, stem, "flow_x", t, h, w, fx, vec, -8.0, 255);
    write_field(dir, stem, "flow_y", t, h, w, fy, vec, -8.0, 255);
    write_field(dir, stem, "instances", t, h, w, ids, 1.0, 0.0, 65535);
}

}  // namespace sflow
