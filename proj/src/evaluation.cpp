#include "canet/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "canet/error.hpp"

namespace canet::eval {

using imaging::ImagePlane;

namespace {

struct Accum {
    double sum = 0.0;
    long long pixels = 0;
    void add(double v) { sum += v; }
};

std::optional<double> finish(const Accum& a, Metric metric) {
    if (a.pixels == 0) return std::nullopt;
    const double mean = a.sum / (3.0 * static_cast<double>(a.pixels));
    return metric == Metric::Rmse ? std::sqrt(mean) : mean;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json region_json(const RegionRmse& r) {
    return {{"shadow", optional_json(r.shadow)},
            {"non_shadow", optional_json(r.non_shadow)},
            {"all", optional_json(r.all)},
            {"pixels", {{"shadow", r.shadow_pixels}, {"non_shadow", r.non_shadow_pixels}, {"all", r.all_pixels}}}};
}

std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

}  // namespace

Metric parse_metric(const std::string& name) {
    if (name == "rmse") return Metric::Rmse;
    if (name == "mae") return Metric::Mae;
    throw ConfigError("unknown metric: " + name);
}

std::string to_string(Metric m) { return m == Metric::Rmse ? "rmse" : "mae"; }

Aggregation parse_aggregation(const std::string& name) {
    if (name == "per_image") return Aggregation::PerImage;
    if (name == "per_pixel") return Aggregation::PerPixel;
    throw ConfigError("unknown aggregation: " + name);
}

std::string to_string(Aggregation a) { return a == Aggregation::PerImage ? "per_image" : "per_pixel"; }

RegionRmse rmse_lab_planes(const ImagePlane& pred_lab, const ImagePlane& gt_lab, const imaging::Mask& mask,
                           Metric metric) {
    if (pred_lab.height() != gt_lab.height() || pred_lab.width() != gt_lab.width() ||
        mask.height() != gt_lab.height() || mask.width() != gt_lab.width()) {
        throw ShapeError("rmse_lab: image and mask sizes differ");
    }
    Accum s, n;
    for (int y = 0; y < gt_lab.height(); ++y)
        for (int x = 0; x < gt_lab.width(); ++x) {
            double e = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = pred_lab.at(y, x, c) - gt_lab.at(y, x, c);
                e += metric == Metric::Rmse ? d * d : std::abs(d);
            }
            Accum& region = mask.at(y, x) ? s : n;
            region.add(e);
            ++region.pixels;
        }
    Accum all{s.sum + n.sum, s.pixels + n.pixels};
    return {finish(s, metric), finish(n, metric), finish(all, metric), s.pixels, n.pixels, all.pixels};
}

RegionRmse rmse_lab(const ImagePlane& pred, const ImagePlane& gt, const imaging::Mask& mask, Metric metric) {
    imaging::validate(pred);
    imaging::validate(gt);
    return rmse_lab_planes(imaging::rgb_to_lab(pred), imaging::rgb_to_lab(gt), mask, metric);
}

ChannelGapStats channel_gap_stats(const std::vector<data::LoadedSample>& samples) {
    ChannelGapStats stats;
    for (const auto& s : samples) {
        if (s.shadow.height() != s.shadow_free.height() || s.shadow.width() != s.shadow_free.width()) {
            throw ShapeError("channel gap: " + s.name + " has mismatched rasters");
        }
        const ImagePlane a = imaging::rgb_to_lab(s.shadow), b = imaging::rgb_to_lab(s.shadow_free);
        std::array<double, 3> sum{};
        long long count = 0;
        for (int y = 0; y < a.height(); ++y)
            for (int x = 0; x < a.width(); ++x) {
                if (!s.mask.at(y, x)) continue;
                for (int c = 0; c < 3; ++c) sum[c] += std::abs(a.at(y, x, c) - b.at(y, x, c));
                ++count;
            }
        if (count == 0) continue;
        for (int c = 0; c < 3; ++c) stats.gap[c] += sum[c] / static_cast<double>(count);
        ++stats.images;
        stats.shadow_pixels += count;
    }
    if (stats.images == 0) throw ValidationError("channel gap: no shadow pixels in the dataset");
    for (auto& g : stats.gap) g /= stats.images;
    return stats;
}

Report evaluate(const Model& model, const std::vector<data::LoadedSample>& samples, const std::string& variant,
                Metric metric, Aggregation aggregation) {
    Report report{variant, metric, aggregation, {}, {}};
    // Pooled sums for PerPixel (undoing the per-image root), region means
    // for PerImage.
    std::array<double, 3> pooled{}, mean_sum{};
    std::array<int, 3> present{};
    auto raw = [&](const std::optional<double>& v) { return metric == Metric::Rmse ? *v * *v : *v; };
    for (const auto& s : samples) {
        const ImagePlane out = model(s);
        ImageResult r{s.name, rmse_lab(out, s.shadow_free, s.mask, metric)};
        const std::array<std::optional<double>, 3> v{r.rmse.shadow, r.rmse.non_shadow, r.rmse.all};
        const std::array<long long, 3> px{r.rmse.shadow_pixels, r.rmse.non_shadow_pixels, r.rmse.all_pixels};
        for (int i = 0; i < 3; ++i) {
            if (!v[i]) continue;
            mean_sum[i] += *v[i];
            pooled[i] += raw(v[i]) * static_cast<double>(px[i]);
            ++present[i];
        }
        report.aggregate.shadow_pixels += px[0];
        report.aggregate.non_shadow_pixels += px[1];
        report.aggregate.all_pixels += px[2];
        report.images.push_back(std::move(r));
    }
    const std::array<long long, 3> total{report.aggregate.shadow_pixels, report.aggregate.non_shadow_pixels,
                                         report.aggregate.all_pixels};
    std::array<std::optional<double>, 3> agg;
    for (int i = 0; i < 3; ++i) {
        if (present[i] == 0) continue;
        if (aggregation == Aggregation::PerImage) {
            agg[i] = mean_sum[i] / present[i];
        } else {
            const double m = pooled[i] / static_cast<double>(total[i]);
            agg[i] = metric == Metric::Rmse ? std::sqrt(m) : m;
        }
    }
    report.aggregate.shadow = agg[0];
    report.aggregate.non_shadow = agg[1];
    report.aggregate.all = agg[2];
    return report;
}

nlohmann::json to_json(const Report& report) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& r : report.images) {
        nlohmann::json j = region_json(r.rmse);
        j["name"] = r.name;
        images.push_back(std::move(j));
    }
    return {{"schema_version", kReportSchemaVersion},
            {"variant", report.variant},
            {"metric", to_string(report.metric)},
            {"aggregation", to_string(report.aggregation)},
            {"images", std::move(images)},
            {"aggregate", region_json(report.aggregate)}};
}

nlohmann::json to_json(const ChannelGapStats& stats) {
    return {{"L", stats.gap[0]}, {"A", stats.gap[1]}, {"B", stats.gap[2]},
            {"images", stats.images}, {"shadow_pixels", stats.shadow_pixels}};
}

std::string text_table(const std::vector<Report>& reports) {
    std::size_t width = 7;
    for (const auto& r : reports) width = std::max(width, r.variant.size());
    std::ostringstream out;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s\n", static_cast<int>(width), "variant", "S", "N", "A");
    out << buf;
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s\n", static_cast<int>(width), r.variant.c_str(),
                      cell(r.aggregate.shadow).c_str(), cell(r.aggregate.non_shadow).c_str(),
                      cell(r.aggregate.all).c_str());
        out << buf;
    }
    return out.str();
}

}  // namespace canet::eval
