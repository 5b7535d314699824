#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "canet/datasets.hpp"

namespace canet::synth {

// Separable: saturated red/green/blue bands, shadow scales RGB by 0.4, so
// the brightest channel of any shadow pixel stays below every lit one.
// RealStyle: smooth shaded textures; the shadow darkens L by roughly half
// with a soft edge and a small cool tint on A/B.
enum class SceneKind { Separable, RealStyle };

data::LoadedSample make_scene(SceneKind kind, int size, std::uint64_t seed);

// RealStyle scene of `seed` with the shadow centre moved right by
// shift * size; a sweep of shifts gives the frames of a short clip.
data::LoadedSample make_moving_shadow(int size, std::uint64_t seed, double shift);

// Shadow-free checkerboard (cell pixels per square) with the rectangle
// [top, top+h) x [left, left+w) darkened.
data::LoadedSample make_checkerboard(int size, int cell, int top, int left, int h, int w);

// Writes shadow/mask/shadow-free PNGs into an ISTD-style tree.
void write_istd(const std::filesystem::path& root, data::Split split, const std::string& name,
                const data::LoadedSample& sample);

}  // namespace canet::synth
