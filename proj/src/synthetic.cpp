#include "canet/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "canet/rng.hpp"

namespace canet::synth {

using imaging::ColorSpace;
using imaging::ImagePlane;
using imaging::Mask;

namespace {

constexpr double kPi = 3.14159265358979323846;

data::LoadedSample separable(int size, Rng& rng) {
    const std::array<std::array<double, 3>, 3> palette{{{0.9, 0.1, 0.1}, {0.1, 0.85, 0.1}, {0.1, 0.1, 0.9}}};
    std::array<int, 3> order{0, 1, 2};
    std::shuffle(order.begin(), order.end(), rng.engine());
    const bool vertical = rng.uniform() < 0.5;

    ImagePlane free(size, size, ColorSpace::RGB);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const int band = std::min(2, (vertical ? x : y) * 3 / size);
            const auto& c = palette[order[band]];
            for (int k = 0; k < 3; ++k) free.at(y, x, k) = std::clamp(c[k] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
        }

    // Shadow rectangle spanning the bands, about half the image.
    Mask mask(size, size);
    const int h = size / 2 + rng.uniform_int(0, size / 8), w = size / 2 + rng.uniform_int(0, size / 8);
    const int top = rng.uniform_int(0, size - h), left = rng.uniform_int(0, size - w);
    ImagePlane shadow = free;
    for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x) {
            mask.set(y, x, true);
            for (int k = 0; k < 3; ++k) shadow.at(y, x, k) *= 0.4;
        }
    return {"", shadow, free, mask};
}

data::LoadedSample real_style(int size, Rng& rng, double shift = 0.0) {
    ImagePlane lab(size, size, ColorSpace::LAB);
    const double base_l = rng.uniform(55, 75);
    const double a0 = rng.uniform(-25, 25), b0 = rng.uniform(-25, 35);
    const double a1 = rng.uniform(-25, 25), b1 = rng.uniform(-25, 35);
    const double freq = rng.uniform(2, 5), phase = rng.uniform(0, 2 * kPi), tilt = rng.uniform(-1, 1);
    const double split = rng.uniform(0.35, 0.65);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
            const double grain = std::sin(2 * kPi * freq * (u + tilt * v) + phase);
            // Two material regions separated by a soft diagonal boundary.
            const double t = 1.0 / (1.0 + std::exp(-30.0 * (u * 0.7 + v * 0.3 - split)));
            lab.at(y, x, 0) = base_l + 10 * grain + 8 * (v - 0.5) + rng.normal(0, 0.8);
            lab.at(y, x, 1) = (1 - t) * a0 + t * a1 + 2 * grain;
            lab.at(y, x, 2) = (1 - t) * b0 + t * b1 + 2 * grain;
        }
    const ImagePlane free = imaging::lab_to_rgb(lab);

    // Elliptical cast shadow with a penumbra of a few pixels.
    const double cy = rng.uniform(0.35, 0.65) * size, cx = (rng.uniform(0.35, 0.65) + shift) * size;
    const double ry = rng.uniform(0.22, 0.32) * size, rx = rng.uniform(0.22, 0.32) * size;
    const double darken = rng.uniform(0.45, 0.55);
    const double da = rng.uniform(0.5, 2.0), db = -rng.uniform(2.0, 4.0);
    ImagePlane shadow_lab = imaging::rgb_to_lab(free);
    Mask mask(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double r = std::hypot((y - cy) / ry, (x - cx) / rx);
            const double s = std::clamp((1.15 - r) / 0.3, 0.0, 1.0);
            if (s >= 0.5) mask.set(y, x, true);
            shadow_lab.at(y, x, 0) *= 1.0 - s * (1.0 - darken);
            shadow_lab.at(y, x, 1) += s * da;
            shadow_lab.at(y, x, 2) += s * db;
        }
    return {"", imaging::lab_to_rgb(shadow_lab), free, mask};
}

}  // namespace

data::LoadedSample make_scene(SceneKind kind, int size, std::uint64_t seed) {
    Rng rng(seed);
    return kind == SceneKind::Separable ? separable(size, rng) : real_style(size, rng);
}

data::LoadedSample make_moving_shadow(int size, std::uint64_t seed, double shift) {
    Rng rng(seed);
    return real_style(size, rng, shift);
}

data::LoadedSample make_checkerboard(int size, int cell, int top, int left, int h, int w) {
    ImagePlane free(size, size, ColorSpace::RGB);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const bool light = ((y / cell) + (x / cell)) % 2 == 0;
            free.at(y, x, 0) = light ? 0.85 : 0.55;
            free.at(y, x, 1) = light ? 0.8 : 0.5;
            free.at(y, x, 2) = light ? 0.7 : 0.45;
        }
    ImagePlane shadow = free;
    Mask mask(size, size);
    for (int y = top; y < top + h; ++y)
        for (int x = left; x < left + w; ++x) {
            mask.set(y, x, true);
            for (int k = 0; k < 3; ++k) shadow.at(y, x, k) *= 0.35;
        }
    return {"checkerboard", shadow, free, mask};
}

void write_istd(const std::filesystem::path& root, data::Split split, const std::string& name,
                const data::LoadedSample& sample) {
    const std::string s = data::to_string(split);
    imaging::save_image(sample.shadow, root / s / (s + "_A") / (name + ".png"));
    imaging::save_mask(sample.mask, root / s / (s + "_B") / (name + ".png"));
    imaging::save_image(sample.shadow_free, root / s / (s + "_C") / (name + ".png"));
}

}  // namespace canet::synth
