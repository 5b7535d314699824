#pragma once

#include <array>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "canet/datasets.hpp"
#include "canet/imaging.hpp"

namespace canet::eval {

// Rmse: sqrt of the mean squared LAB difference over pixels and channels.
// Mae: mean absolute LAB difference, for comparison with tables that report
// MAE under the RMSE name.
enum class Metric { Rmse, Mae };
enum class Aggregation { PerImage, PerPixel };

Metric parse_metric(const std::string& name);
std::string to_string(Metric m);
Aggregation parse_aggregation(const std::string& name);
std::string to_string(Aggregation a);

// A region with no pixels has no value (nullopt), never zero.
struct RegionRmse {
    std::optional<double> shadow;
    std::optional<double> non_shadow;
    std::optional<double> all;
    long long shadow_pixels = 0;
    long long non_shadow_pixels = 0;
    long long all_pixels = 0;
};

// Both images converted to LAB; mask selects the shadow region.
RegionRmse rmse_lab(const imaging::ImagePlane& pred, const imaging::ImagePlane& gt, const imaging::Mask& mask,
                    Metric metric = Metric::Rmse);
// Same, on images already in LAB.
RegionRmse rmse_lab_planes(const imaging::ImagePlane& pred_lab, const imaging::ImagePlane& gt_lab,
                           const imaging::Mask& mask, Metric metric = Metric::Rmse);

struct ChannelGapStats {
    // Mean |shadow - shadow_free| per LAB channel inside the mask, averaged
    // over the images that have shadow pixels.
    std::array<double, 3> gap{};
    int images = 0;
    long long shadow_pixels = 0;
};

// Throws ValidationError when no image has a shadow pixel.
ChannelGapStats channel_gap_stats(const std::vector<data::LoadedSample>& samples);

struct ImageResult {
    std::string name;
    RegionRmse rmse;
};

struct Report {
    std::string variant;
    Metric metric = Metric::Rmse;
    Aggregation aggregation = Aggregation::PerImage;
    std::vector<ImageResult> images;
    RegionRmse aggregate;
};

using Model = std::function<imaging::ImagePlane(const data::LoadedSample&)>;

// Runs `model` on every sample and aggregates. PerImage averages each
// region over the images where it is present; PerPixel pools all pixels.
Report evaluate(const Model& model, const std::vector<data::LoadedSample>& samples, const std::string& variant,
                Metric metric = Metric::Rmse, Aggregation aggregation = Aggregation::PerImage);

inline constexpr int kReportSchemaVersion = 1;

nlohmann::json to_json(const Report& report);
nlohmann::json to_json(const ChannelGapStats& stats);
// Fixed column order S, N, A; one row per report.
std::string text_table(const std::vector<Report>& reports);

}  // namespace canet::eval
