#pragma once

#include <vector>

#include "canet/nn/graph.hpp"

namespace canet::nn {

// Convolution over a CHW tensor. w: [out, in, k, k], b: [out]. Zero padding.
Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad);
// y = W x + b with x: [in], W: [out, in], b: [out].
Var linear(Graph& g, Var x, Var w, Var b);

Var relu(Graph& g, Var x);
Var leaky_relu(Graph& g, Var x, double slope);
Var sigmoid(Graph& g, Var x);
// log(p / (1 - p)); inputs must lie strictly inside (0, 1).
Var logit(Graph& g, Var x);
// Identity inside [lo, hi], constant (zero gradient) outside.
Var clamp(Graph& g, Var x, double lo, double hi);

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double s);
Var add_scalar(Graph& g, Var x, double s);

// Concatenation / slicing along the leading axis (channels for CHW).
Var concat(Graph& g, const std::vector<Var>& xs);
Var slice(Graph& g, Var x, int begin, int count);
Var reshape(Graph& g, Var x, std::vector<int> shape);

// Spatial window [top, top+h) x [left, left+w) of a CHW tensor.
Var crop(Graph& g, Var x, int top, int left, int h, int w);

Var upsample_nearest(Graph& g, Var x, int factor);
Var avg_pool(Graph& g, Var x, int factor);

Var softmax(Graph& g, Var logits);
// -log softmax(logits)[target]; returns a scalar.
Var cross_entropy(Graph& g, Var logits, int target);

// Scalar reductions.
Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);
Var mean_squared_error(Graph& g, Var a, Var b);
Var mean_abs_error(Graph& g, Var a, Var b);
// sqrt(sum (a-b)^2); the true L2 norm of the residual.
Var l2_distance(Graph& g, Var a, Var b);

// Forward differences per channel: output [2C, H, W] with the x-gradients of
// all channels first, then the y-gradients. Trailing row/column are zero.
Var image_gradient(Graph& g, Var x);

// Sparse linear map applied independently to every channel of a CHW tensor:
// out[c, i] = sum_j weight(i, j) * in[c, j] over flattened spatial cells.
// Rows are given in CSR form and must cover every output cell.
struct CellMap {
    int cells = 0;
    std::vector<int> row_begin;  // size cells + 1
    std::vector<int> source;
    std::vector<double> weight;
};
Var cell_map(Graph& g, Var x, const CellMap& map);

}  // namespace canet::nn
