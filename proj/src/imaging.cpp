#include "canet/imaging.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "canet/color_ops.hpp"
#include "canet/error.hpp"

namespace canet::imaging {

namespace {

// sRGB primaries, D65 white.
const Eigen::Matrix3d& rgb_to_xyz_matrix() {
    static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 0.4124564, 0.3575761, 0.1804375,  //
                                      0.2126729, 0.7151522, 0.0721750,                       //
                                      0.0193339, 0.1191920, 0.9503041)
                                         .finished();
    return m;
}

const Eigen::Matrix3d& xyz_to_rgb_matrix() {
    static const Eigen::Matrix3d m = rgb_to_xyz_matrix().inverse();
    return m;
}

constexpr double kWhiteX = 0.95047;
constexpr double kWhiteY = 1.0;
constexpr double kWhiteZ = 1.08883;
constexpr double kDelta = 6.0 / 29.0;

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
double linear_to_srgb(double c) { return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055; }

double lab_f(double t) {
    return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}
double lab_f_inv(double t) { return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0); }

bool has_supported_extension(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

cv::Mat read_raster(const std::filesystem::path& path, int flags) {
    if (!has_supported_extension(path)) throw IoError("unsupported image format: " + path.string());
    if (!std::filesystem::is_regular_file(path)) throw IoError("cannot read " + path.string());
    cv::Mat m = cv::imread(path.string(), flags);
    if (m.empty()) throw DecodeError("failed to decode " + path.string());
    return m;
}

std::uint8_t quantize(double v) {
    const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

}  // namespace

ImagePlane::ImagePlane(int height, int width, ColorSpace space, double fill)
    : height_(height), width_(width), space_(space) {
    if (height < 1 || width < 1) throw ValidationError("image dimensions must be positive");
    data_.assign(static_cast<std::size_t>(height) * width * kChannels, fill);
}

ImagePlane::ImagePlane(int height, int width, ColorSpace space, std::vector<double> data)
    : height_(height), width_(width), space_(space), data_(std::move(data)) {
    if (height < 1 || width < 1) throw ValidationError("image dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width * kChannels) {
        throw ValidationError("image data size does not match dimensions");
    }
}

LightnessPlane::LightnessPlane(int height, int width, double fill) : height_(height), width_(width) {
    if (height < 1 || width < 1) throw ValidationError("plane dimensions must be positive");
    data_.assign(static_cast<std::size_t>(height) * width, fill);
}

LightnessPlane::LightnessPlane(int height, int width, std::vector<double> data)
    : height_(height), width_(width), data_(std::move(data)) {
    if (height < 1 || width < 1) throw ValidationError("plane dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width) {
        throw ValidationError("plane data size does not match dimensions");
    }
}

double LightnessPlane::mean() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s / static_cast<double>(data_.size());
}

Mask::Mask(int height, int width, bool fill) : height_(height), width_(width) {
    if (height < 1 || width < 1) throw ValidationError("mask dimensions must be positive");
    data_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }

void validate(const ImagePlane& img) {
    if (img.empty()) throw ValidationError("empty image");
    for (double v : img.data()) {
        if (!std::isfinite(v)) throw ValidationError("image contains non-finite values");
    }
}

std::array<double, 3> rgb_to_lab_pixel(double r, double g, double b) {
    const Eigen::Vector3d lin(srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    const Eigen::Vector3d xyz = rgb_to_xyz_matrix() * lin;
    const double fx = lab_f(xyz[0] / kWhiteX);
    const double fy = lab_f(xyz[1] / kWhiteY);
    const double fz = lab_f(xyz[2] / kWhiteZ);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<double, 3> lab_to_rgb_pixel(double l, double a, double b) {
    const double fy = (l + 16.0) / 116.0;
    const double fx = fy + a / 500.0;
    const double fz = fy - b / 200.0;
    const Eigen::Vector3d xyz(kWhiteX * lab_f_inv(fx), kWhiteY * lab_f_inv(fy), kWhiteZ * lab_f_inv(fz));
    const Eigen::Vector3d lin = xyz_to_rgb_matrix() * xyz;
    std::array<double, 3> rgb{};
    for (int i = 0; i < 3; ++i) rgb[i] = std::clamp(linear_to_srgb(std::max(lin[i], 0.0)), 0.0, 1.0);
    return rgb;
}

ImagePlane rgb_to_lab(const ImagePlane& rgb) {
    validate(rgb);
    if (rgb.colorspace() != ColorSpace::RGB) throw ValidationError("rgb_to_lab expects an RGB image");
    ImagePlane out(rgb.height(), rgb.width(), ColorSpace::LAB);
    const auto& src = rgb.data();
    auto& dst = out.data();
    for (std::size_t i = 0; i < src.size(); i += 3) {
        const auto lab = rgb_to_lab_pixel(src[i], src[i + 1], src[i + 2]);
        dst[i] = lab[0];
        dst[i + 1] = lab[1];
        dst[i + 2] = lab[2];
    }
    return out;
}

ImagePlane lab_to_rgb(const ImagePlane& lab) {
    validate(lab);
    if (lab.colorspace() != ColorSpace::LAB) throw ValidationError("lab_to_rgb expects a LAB image");
    ImagePlane out(lab.height(), lab.width(), ColorSpace::RGB);
    const auto& src = lab.data();
    auto& dst = out.data();
    for (std::size_t i = 0; i < src.size(); i += 3) {
        const auto rgb = lab_to_rgb_pixel(src[i], src[i + 1], src[i + 2]);
        dst[i] = rgb[0];
        dst[i + 1] = rgb[1];
        dst[i + 2] = rgb[2];
    }
    return out;
}

LightnessPlane lightness(const ImagePlane& img) {
    const ImagePlane lab = img.colorspace() == ColorSpace::LAB ? img : rgb_to_lab(img);
    LightnessPlane out(lab.height(), lab.width());
    for (int y = 0; y < lab.height(); ++y)
        for (int x = 0; x < lab.width(); ++x) out.at(y, x) = lab.at(y, x, 0);
    return out;
}

LightnessPlane local_mean(const LightnessPlane& plane, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) {
        throw ConfigError("mean-filter kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    const int h = plane.height(), w = plane.width(), r = kernel / 2;
    LightnessPlane out(h, w);
    const double inv = 1.0 / (kernel * kernel);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = -r; dy <= r; ++dy) {
                const int yy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -r; dx <= r; ++dx) s += plane.at(yy, std::clamp(x + dx, 0, w - 1));
            }
            out.at(y, x) = s * inv;
        }
    }
    return out;
}

LightnessPlane shadow_unaware(const LightnessPlane& plane, int kernel) {
    const LightnessPlane local = local_mean(plane, kernel);
    // A 1x1 window means no lightness normalization at all.
    if (kernel == 1) return plane;
    const double global = plane.mean();
    LightnessPlane out(plane.height(), plane.width());
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = plane.data()[i] - local.data()[i] + global;
    return out;
}

ImagePlane shadow_unaware_image(const ImagePlane& rgb, int kernel) {
    ImagePlane lab = rgb_to_lab(rgb);
    const LightnessPlane unaware = shadow_unaware(lightness(lab), kernel);
    for (int y = 0; y < lab.height(); ++y)
        for (int x = 0; x < lab.width(); ++x) lab.at(y, x, 0) = std::clamp(unaware.at(y, x), 0.0, 100.0);
    return lab_to_rgb(lab);
}

GradientField image_gradient(const ImagePlane& img) {
    if (img.empty()) throw ValidationError("empty image");
    GradientField g{img.height(), img.width(), img.channels(), {}};
    g.data.assign(static_cast<std::size_t>(g.height) * g.width * g.channels * 2, 0.0);
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x)
            for (int c = 0; c < g.channels; ++c) {
                const std::size_t base = ((static_cast<std::size_t>(y) * g.width + x) * g.channels + c) * 2;
                if (x + 1 < g.width) g.data[base] = img.at(y, x + 1, c) - img.at(y, x, c);
                if (y + 1 < g.height) g.data[base + 1] = img.at(y + 1, x, c) - img.at(y, x, c);
            }
    return g;
}

Tensor to_chw(const ImagePlane& img) {
    Tensor t = Tensor::chw(img.channels(), img.height(), img.width());
    for (int c = 0; c < img.channels(); ++c)
        for (int y = 0; y < img.height(); ++y)
            for (int x = 0; x < img.width(); ++x) t.at(c, y, x) = img.at(y, x, c);
    return t;
}

ImagePlane from_chw(const Tensor& t, ColorSpace space) {
    if (t.rank() != 3 || t.channels() != ImagePlane::kChannels) {
        throw ShapeError("from_chw expects a 3-channel CHW tensor, got " + shape_string(t.shape()));
    }
    ImagePlane img(t.height(), t.width(), space);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.height(); ++y)
            for (int x = 0; x < t.width(); ++x) img.at(y, x, c) = t.at(c, y, x);
    return img;
}

Tensor lab_normalized_chw(const ImagePlane& lab) {
    if (lab.colorspace() != ColorSpace::LAB) throw ValidationError("expected a LAB image");
    Tensor t = to_chw(lab);
    const std::size_t plane = static_cast<std::size_t>(lab.height()) * lab.width();
    for (std::size_t i = 0; i < plane; ++i) t[i] /= 100.0;
    for (std::size_t i = plane; i < 3 * plane; ++i) t[i] /= 128.0;
    return t;
}

ImagePlane lab_from_normalized_chw(const Tensor& t) {
    Tensor scaled = t;
    const std::size_t plane = static_cast<std::size_t>(t.height()) * t.width();
    for (std::size_t i = 0; i < plane; ++i) scaled[i] *= 100.0;
    for (std::size_t i = plane; i < 3 * plane; ++i) scaled[i] *= 128.0;
    return from_chw(scaled, ColorSpace::LAB);
}

ImagePlane load_image(const std::filesystem::path& path) {
    const cv::Mat bgr = read_raster(path, cv::IMREAD_COLOR);
    cv::Mat bgr8;
    if (bgr.depth() == CV_8U) {
        bgr8 = bgr;
    } else {
        throw DecodeError("unsupported bit depth in " + path.string());
    }
    ImagePlane img(bgr8.rows, bgr8.cols, ColorSpace::RGB);
    for (int y = 0; y < bgr8.rows; ++y) {
        const auto* row = bgr8.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr8.cols; ++x) {
            img.at(y, x, 0) = row[x][2] / 255.0;
            img.at(y, x, 1) = row[x][1] / 255.0;
            img.at(y, x, 2) = row[x][0] / 255.0;
        }
    }
    return img;
}

void save_image(const ImagePlane& rgb, const std::filesystem::path& path) {
    validate(rgb);
    if (rgb.colorspace() != ColorSpace::RGB) throw ValidationError("save_image expects an RGB image");
    if (!has_supported_extension(path)) throw IoError("unsupported image format: " + path.string());
    cv::Mat bgr(rgb.height(), rgb.width(), CV_8UC3);
    for (int y = 0; y < rgb.height(); ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < rgb.width(); ++x) {
            row[x] = cv::Vec3b(quantize(rgb.at(y, x, 2)), quantize(rgb.at(y, x, 1)), quantize(rgb.at(y, x, 0)));
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write " + path.string());
}

Mask load_mask(const std::filesystem::path& path) {
    const cv::Mat gray = read_raster(path, cv::IMREAD_GRAYSCALE);
    Mask m(gray.rows, gray.cols);
    for (int y = 0; y < gray.rows; ++y) {
        const auto* row = gray.ptr<std::uint8_t>(y);
        for (int x = 0; x < gray.cols; ++x) m.set(y, x, row[x] / 255.0 >= 0.5);
    }
    return m;
}

void save_mask(const Mask& mask, const std::filesystem::path& path) {
    if (!has_supported_extension(path)) throw IoError("unsupported image format: " + path.string());
    cv::Mat gray(mask.height(), mask.width(), CV_8UC1);
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) gray.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), gray)) throw IoError("cannot write " + path.string());
}

std::uint64_t content_hash(const ImagePlane& img) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    const int dims[2] = {img.height(), img.width()};
    mix(dims, sizeof dims);
    mix(img.data().data(), img.data().size() * sizeof(double));
    return h;
}

nn::Var lab_to_rgb(nn::Graph& g, nn::Var lab_normalized) {
    const Tensor& in = g.value(lab_normalized);
    if (in.rank() != 3 || in.channels() != 3) throw ShapeError("lab_to_rgb expects a [3, H, W] tensor");
    const std::size_t plane = static_cast<std::size_t>(in.height()) * in.width();
    const Eigen::Matrix3d& m = xyz_to_rgb_matrix();
    const double white[3] = {kWhiteX, kWhiteY, kWhiteZ};

    Tensor out(in.shape());
    // Per-pixel Jacobian d(rgb)/d(lab_normalized), row-major 3x3.
    auto jac = std::make_shared<std::vector<double>>(plane * 9);
    for (std::size_t i = 0; i < plane; ++i) {
        const double l = in[i] * 100.0, a = in[plane + i] * 128.0, b = in[2 * plane + i] * 128.0;
        const double fy = (l + 16.0) / 116.0;
        const double f[3] = {fy + a / 500.0, fy, fy - b / 200.0};
        // d f / d (L, A, B) in normalized units.
        const double df[3][3] = {{100.0 / 116.0, 128.0 / 500.0, 0.0},
                                 {100.0 / 116.0, 0.0, 0.0},
                                 {100.0 / 116.0, 0.0, -128.0 / 200.0}};
        Eigen::Vector3d xyz;
        Eigen::Matrix3d dxyz;
        for (int k = 0; k < 3; ++k) {
            const double t = f[k];
            xyz[k] = white[k] * lab_f_inv(t);
            const double slope = white[k] * (t > kDelta ? 3.0 * t * t : 3.0 * kDelta * kDelta);
            for (int j = 0; j < 3; ++j) dxyz(k, j) = slope * df[k][j];
        }
        const Eigen::Vector3d lin = m * xyz;
        const Eigen::Matrix3d dlin = m * dxyz;
        for (int c = 0; c < 3; ++c) {
            const double v = lin[c];
            out[c * plane + i] = linear_to_srgb(v);
            const double dg = v <= 0.0031308 ? 12.92 : 1.055 / 2.4 * std::pow(v, 1.0 / 2.4 - 1.0);
            for (int j = 0; j < 3; ++j) (*jac)[i * 9 + c * 3 + j] = dg * dlin(c, j);
        }
    }
    return g.record(std::move(out), {lab_normalized}, [lab_normalized, jac, plane](nn::Graph& gr, nn::Var self) {
        const Tensor& gy = gr.grad(self);
        Tensor& gx = gr.grad(lab_normalized);
        for (std::size_t i = 0; i < plane; ++i)
            for (int c = 0; c < 3; ++c)
                for (int j = 0; j < 3; ++j) gx[j * plane + i] += gy[c * plane + i] * (*jac)[i * 9 + c * 3 + j];
    });
}

}  // namespace canet::imaging
