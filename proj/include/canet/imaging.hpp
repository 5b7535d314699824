#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "canet/tensor.hpp"

namespace canet::imaging {

enum class ColorSpace { RGB, LAB };

// Channel-last H x W x 3 floating-point raster. RGB values live in [0,1];
// LAB values use L in [0,100] and A/B in [-128,127].
class ImagePlane {
public:
    static constexpr int kChannels = 3;

    ImagePlane() = default;
    ImagePlane(int height, int width, ColorSpace space, double fill = 0.0);
    ImagePlane(int height, int width, ColorSpace space, std::vector<double> data);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return kChannels; }
    ColorSpace colorspace() const { return space_; }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c]; }
    double at(int y, int x, int c) const {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
    }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool operator==(const ImagePlane& other) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    ColorSpace space_ = ColorSpace::RGB;
    std::vector<double> data_;
};

// Single-channel plane on the LAB L scale (or any scalar field of an image).
class LightnessPlane {
public:
    LightnessPlane() = default;
    LightnessPlane(int height, int width, double fill = 0.0);
    LightnessPlane(int height, int width, std::vector<double> data);

    int height() const { return height_; }
    int width() const { return width_; }
    double& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    double at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double mean() const;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

// Binary raster; true marks shadow.
class Mask {
public:
    Mask() = default;
    Mask(int height, int width, bool fill = false);

    int height() const { return height_; }
    int width() const { return width_; }
    bool at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x] != 0; }
    void set(int y, int x, bool v) { data_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
    std::size_t count() const;
    bool operator==(const Mask& other) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

// Per-pixel forward differences: index (y, x, c, axis) with axis 0 = x, 1 = y.
struct GradientField {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;
    double at(int y, int x, int c, int axis) const {
        return data[((static_cast<std::size_t>(y) * width + x) * channels + c) * 2 + axis];
    }
};

// Throws ValidationError on non-finite elements or bad dimensions.
void validate(const ImagePlane& img);

std::array<double, 3> rgb_to_lab_pixel(double r, double g, double b);
std::array<double, 3> lab_to_rgb_pixel(double l, double a, double b);

ImagePlane rgb_to_lab(const ImagePlane& rgb);
// Output clamped to [0,1].
ImagePlane lab_to_rgb(const ImagePlane& lab);

LightnessPlane lightness(const ImagePlane& img);

// k x k box mean with replicate padding. Kernel must be odd and >= 1.
LightnessPlane local_mean(const LightnessPlane& plane, int kernel);

// I - localMean(I) + mean(I), per pixel. kernel == 1 disables the filter and
// returns the input unchanged.
LightnessPlane shadow_unaware(const LightnessPlane& plane, int kernel = 3);

// RGB image whose L channel is replaced by the shadow-unaware lightness.
ImagePlane shadow_unaware_image(const ImagePlane& rgb, int kernel = 3);

GradientField image_gradient(const ImagePlane& img);

// CHW tensor <-> channel-last plane.
Tensor to_chw(const ImagePlane& img);
ImagePlane from_chw(const Tensor& t, ColorSpace space);

// Normalized LAB used inside the networks: L/100, A/128, B/128.
Tensor lab_normalized_chw(const ImagePlane& lab);
ImagePlane lab_from_normalized_chw(const Tensor& t);

ImagePlane load_image(const std::filesystem::path& path);
// Quantizes to 8 bit with round-half-up. Format picked from the extension.
void save_image(const ImagePlane& rgb, const std::filesystem::path& path);
// Grayscale decode thresholded at 0.5.
Mask load_mask(const std::filesystem::path& path);
void save_mask(const Mask& mask, const std::filesystem::path& path);

std::uint64_t content_hash(const ImagePlane& img);

}  // namespace canet::imaging
