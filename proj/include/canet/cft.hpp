#pragma once

#include <optional>
#include <vector>

#include "canet/matchset.hpp"
#include "canet/nn/ops.hpp"
#include "canet/tensor.hpp"

namespace canet::cft {

// Centered: odd window of n taps per axis, offsets -n/2..n/2.
// Anchored: the literal corner-anchored window with offsets 0..n per axis.
enum class WindowMode { Centered, Anchored };

struct CftConfig {
    int k = 3;           // transferred matches per query
    int n = 5;           // Gaussian window size
    double sigma = 1.0;  // Gaussian spread
    WindowMode window = WindowMode::Centered;

    void validate() const;
};

// Normalized Gaussian taps phi(dx, dy) = exp(-(dx^2+dy^2) / (2 sigma^2)).
struct WeightTable {
    std::vector<int> offsets;     // per-axis offsets
    std::vector<double> weights;  // row-major, offsets.size()^2, sums to 1
    int size() const { return static_cast<int>(offsets.size()); }
    double at(int iy, int ix) const { return weights[static_cast<std::size_t>(iy) * offsets.size() + ix]; }
};

WeightTable gaussian_weights(int n, double sigma, WindowMode window = WindowMode::Centered);

// Gaussian-weighted feature at one cell of a CHW map. Taps falling outside
// the map are dropped and the remaining weights renormalized.
std::vector<double> gaussian_sample(const Tensor& map, int y, int x, int n, double sigma,
                                    WindowMode window = WindowMode::Centered);

// Samples every cell of an h x w rectangle whose top-left cell is (top, left).
Tensor gaussian_sample_rect(const Tensor& map, int top, int left, int h, int w, const CftConfig& cfg);

// Score-weighted convex combination sum_i (w_i / sum w) * samples_i.
// Returns nullopt when the weights sum to zero (no confident match).
std::optional<Tensor> blend_topk(const std::vector<Tensor>& samples, const std::vector<double>& scores);

// Number of feature cells a 32-pixel patch spans at `stride`.
int cells_per_patch(int stride);

// The transfer as a sparse per-cell linear map over a (height x width) level.
nn::CellMap build_transfer_map(int height, int width, int stride, const MatchSet& matches, const CftConfig& cfg);

// Out-of-place transfer on one pyramid level. Non-query cells are copied
// unchanged; overlapping query rectangles are averaged cellwise.
Tensor apply_cft(const Tensor& level, int stride, const MatchSet& matches, const CftConfig& cfg);

// Differentiable version used inside the removal network.
nn::Var apply_cft(nn::Graph& g, nn::Var level, int stride, const MatchSet& matches, const CftConfig& cfg);

}  // namespace canet::cft
