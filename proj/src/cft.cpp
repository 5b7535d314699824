#include "canet/cft.hpp"

#include <cmath>
#include <map>

#include "canet/error.hpp"

namespace canet::cft {

namespace {

bool inside(int y, int x, int h, int w) { return y >= 0 && x >= 0 && y < h && x < w; }

// (source cell, weight) taps of the Gaussian sample centered at (y, x),
// already renormalized over the in-map taps.
std::vector<std::pair<int, double>> sample_taps(int y, int x, int h, int w, const WeightTable& table) {
    std::vector<std::pair<int, double>> taps;
    double total = 0.0;
    for (int iy = 0; iy < table.size(); ++iy) {
        for (int ix = 0; ix < table.size(); ++ix) {
            const int yy = y + table.offsets[iy], xx = x + table.offsets[ix];
            if (!inside(yy, xx, h, w)) continue;
            taps.emplace_back(yy * w + xx, table.at(iy, ix));
            total += table.at(iy, ix);
        }
    }
    for (auto& t : taps) t.second /= total;
    return taps;
}

}  // namespace

void CftConfig::validate() const {
    if (k < 1) throw ConfigError("cft.k must be >= 1");
    if (n < 1 || (window == WindowMode::Centered && n % 2 == 0)) {
        throw ConfigError("cft.n must be an odd integer >= 1, got " + std::to_string(n));
    }
    if (!(sigma > 0.0)) throw ConfigError("cft.sigma must be positive");
}

WeightTable gaussian_weights(int n, double sigma, WindowMode window) {
    CftConfig{1, n, sigma, window}.validate();
    WeightTable t;
    if (window == WindowMode::Centered) {
        for (int o = -n / 2; o <= n / 2; ++o) t.offsets.push_back(o);
    } else {
        for (int o = 0; o <= n; ++o) t.offsets.push_back(o);
    }
    const std::size_t m = t.offsets.size();
    t.weights.resize(m * m);
    double total = 0.0;
    for (std::size_t iy = 0; iy < m; ++iy)
        for (std::size_t ix = 0; ix < m; ++ix) {
            const double dy = t.offsets[iy], dx = t.offsets[ix];
            total += t.weights[iy * m + ix] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    for (auto& v : t.weights) v /= total;
    return t;
}

std::vector<double> gaussian_sample(const Tensor& map, int y, int x, int n, double sigma, WindowMode window) {
    if (map.rank() != 3) throw ShapeError("gaussian_sample expects a CHW map");
    const int h = map.height(), w = map.width();
    if (!inside(y, x, h, w)) {
        throw IndexError("sample center (" + std::to_string(y) + ", " + std::to_string(x) + ") outside " +
                         std::to_string(h) + "x" + std::to_string(w) + " map");
    }
    const auto taps = sample_taps(y, x, h, w, gaussian_weights(n, sigma, window));
    std::vector<double> out(static_cast<std::size_t>(map.channels()), 0.0);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    // Accumulate offsets from the center value so a constant map is
    // reproduced exactly rather than up to rounding of sum(w) = 1.
    const std::size_t center = static_cast<std::size_t>(y) * w + x;
    for (int c = 0; c < map.channels(); ++c) {
        const double ref = map[c * plane + center];
        double delta = 0.0;
        for (const auto& [cell, weight] : taps) delta += weight * (map[c * plane + cell] - ref);
        out[c] = ref + delta;
    }
    return out;
}

Tensor gaussian_sample_rect(const Tensor& map, int top, int left, int h, int w, const CftConfig& cfg) {
    Tensor out = Tensor::chw(map.channels(), h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto v = gaussian_sample(map, top + y, left + x, cfg.n, cfg.sigma, cfg.window);
            for (int c = 0; c < map.channels(); ++c) out.at(c, y, x) = v[c];
        }
    return out;
}

std::optional<Tensor> blend_topk(const std::vector<Tensor>& samples, const std::vector<double>& scores) {
    if (samples.empty() || samples.size() != scores.size()) {
        throw ValidationError("blend_topk needs one score per sample");
    }
    double total = 0.0;
    for (double w : scores) {
        if (!(w >= 0.0)) throw ValidationError("blend_topk weights must be non-negative");
        total += w;
    }
    for (const auto& s : samples) {
        if (!s.same_shape(samples.front())) throw ShapeError("blend_topk samples differ in shape");
    }
    if (total == 0.0) return std::nullopt;
    Tensor out(samples.front().shape());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double w = scores[i] / total;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w * samples[i][j];
    }
    return out;
}

int cells_per_patch(int stride) { return (data::kPatchSize + stride - 1) / stride; }

nn::CellMap build_transfer_map(int height, int width, int stride, const MatchSet& matches, const CftConfig& cfg) {
    cfg.validate();
    if (stride < 1) throw ConfigError("feature stride must be >= 1");
    const WeightTable table = gaussian_weights(cfg.n, cfg.sigma, cfg.window);
    const int cells = height * width;
    const int extent = cells_per_patch(stride);

    std::vector<std::map<int, double>> rows(static_cast<std::size_t>(cells));
    std::vector<int> overlap(static_cast<std::size_t>(cells), 0);

    for (const auto& q : matches.queries) {
        const std::size_t used = std::min<std::size_t>(q.matches.size(), static_cast<std::size_t>(cfg.k));
        const int q_top = q.query.row / stride, q_left = q.query.col / stride;
        for (int dy = 0; dy < extent; ++dy) {
            for (int dx = 0; dx < extent; ++dx) {
                const int ty = q_top + dy, tx = q_left + dx;
                if (!inside(ty, tx, height, width)) continue;
                // Sources whose matching cell falls off the map drop out of
                // this cell's blend.
                double total = 0.0;
                for (std::size_t m = 0; m < used; ++m) {
                    const auto& src = q.matches[m].source;
                    if (inside(src.row / stride + dy, src.col / stride + dx, height, width)) total += q.matches[m].score;
                }
                if (total <= 0.0) continue;
                auto& row = rows[static_cast<std::size_t>(ty * width + tx)];
                for (std::size_t m = 0; m < used; ++m) {
                    const auto& src = q.matches[m].source;
                    const int sy = src.row / stride + dy, sx = src.col / stride + dx;
                    if (!inside(sy, sx, height, width)) continue;
                    const double w = q.matches[m].score / total;
                    if (w == 0.0) continue;
                    for (const auto& [cell, tap] : sample_taps(sy, sx, height, width, table)) row[cell] += w * tap;
                }
                ++overlap[static_cast<std::size_t>(ty * width + tx)];
            }
        }
    }

    nn::CellMap map;
    map.cells = cells;
    map.row_begin.reserve(static_cast<std::size_t>(cells) + 1);
    map.row_begin.push_back(0);
    for (int i = 0; i < cells; ++i) {
        if (overlap[i] == 0) {
            map.source.push_back(i);
            map.weight.push_back(1.0);
        } else {
            for (const auto& [cell, w] : rows[i]) {
                map.source.push_back(cell);
                map.weight.push_back(w / overlap[i]);
            }
        }
        map.row_begin.push_back(static_cast<int>(map.source.size()));
    }
    return map;
}

Tensor apply_cft(const Tensor& level, int stride, const MatchSet& matches, const CftConfig& cfg) {
    if (level.rank() != 3) throw ShapeError("apply_cft expects a CHW feature map");
    if (matches.empty()) return level;
    nn::Graph g;
    nn::Var out = apply_cft(g, g.constant(level), stride, matches, cfg);
    return g.value(out);
}

nn::Var apply_cft(nn::Graph& g, nn::Var level, int stride, const MatchSet& matches, const CftConfig& cfg) {
    if (matches.empty()) return level;
    const Tensor& v = g.value(level);
    return nn::cell_map(g, level, build_transfer_map(v.height(), v.width(), stride, matches, cfg));
}

}  // namespace canet::cft
