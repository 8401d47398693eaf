#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "camo/tensor.hpp"

namespace camo {

// Reverse-mode autodiff over a dynamically built DAG. Nodes own their value;
// gradients are allocated lazily during backward(). The graph is rebuilt per
// training step and freed by shared_ptr refcounting.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;
    const char* op = "leaf";

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(val.shape);
            grad_ready = true;
        }
        return grad;
    }
};

Var constant(Tensor v);
Var param(Tensor v);

// Seeds root->grad with ones (root must be scalar) and propagates.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& a, double k, double c);  // k*a + c
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var abs_v(const Var& a);  // |a|; subgradient 0 at 0

// Broadcast multiply of [N,C,H,W] by [N,1,H,W].
Var mul_mask(const Var& x, const Var& m);

// ---- structure ----
Var concat_ch(const std::vector<Var>& xs);
Var slice_ch(const Var& x, int c0, int len);
Var upsample2x(const Var& x);
Var stop_grad(const Var& x);

// ---- linear algebra ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear(const Var& x, const Var& w, const Var& b);  // x:[N,F] w:[O,F] b:[O]

// ---- reductions ----
Var spatial_sum(const Var& x);  // [N,C,H,W] -> [N,C]
Var row_sum(const Var& x);      // [N,C] -> [N]
Var sum_all(const Var& x);      // -> [1]
Var mean_all(const Var& x);     // -> [1]
Var scale_rows(const Var& x, const std::vector<double>& s);  // row n scaled by s[n]

// ---- detection / loss specific ----
// Select rows from a [N,C,G,G] map at (n, gy, gx) indices -> [R,C].
Var gather_cells(const Var& x, const std::vector<std::array<int, 3>>& idx);
// Cross-entropy of each logit row [R,2] against class 0 (background) -> [R].
Var bg_ce_rows(const Var& logits);
// Softmax cross-entropy of [R,K] logits against integer labels -> [R].
Var softmax_ce_rows(const Var& logits, const std::vector<int>& labels);
// [N,C,H,W] -> [N*H*W, C] rows ordered (n, y, x).
Var channels_to_rows(const Var& x);
// Mean over contiguous segments of a [R] vector -> [S].
Var segment_mean(const Var& x, const std::vector<int>& seg_sizes);
// Per-position unit normalization across channels: f / sqrt(sum_c f^2 + eps).
Var channel_unit_norm(const Var& x, double eps = 1e-12);

// ---- colorspace ----
// CIELAB conversion of an [N,3,H,W] sRGB tensor -> [N,3,H,W] with channels
// (L, a, b) in Lab units. One-sided (lower-branch) derivatives at the
// piecewise joints. Values outside [0,1] are accepted and extrapolated
// linearly below 0 so gradients stay defined during optimization.
Var rgb_to_lab_v(const Var& x);

// Plain-tensor conversions shared with the colorspace module.
void lab_from_rgb_pixel(const double rgb[3], double lab[3]);
void rgb_from_lab_pixel(const double lab[3], double rgb[3]);
// d(lab)/d(rgb) as row-major 3x3 jacobian.
void lab_from_rgb_jacobian(const double rgb[3], double jac[9]);

}  // namespace camo
