#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "camo/common.hpp"

namespace camo {

// Dense row-major tensor of doubles. Rank is dynamic; the codebase uses
// [N,C,H,W] for batched feature maps, [C,H,W] for single images, [H,W] for
// masks and channel grids, and [n] / [1] for vectors and scalars.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ValidationError("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<double> d) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<int64_t>(d.size()) != numel_of(t.shape))
            throw ValidationError("Tensor::from: data size does not match shape");
        t.data = std::move(d);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = rng.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // NCHW accessor.
    double& at(int n, int c, int y, int x) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    double at(int n, int c, int y, int x) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    // CHW accessor.
    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    // HW accessor.
    double& at(int y, int x) { return data[static_cast<size_t>(y) * shape[1] + x]; }
    double at(int y, int x) const { return data[static_cast<size_t>(y) * shape[1] + x]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const {
        double s = 0.0;
        for (double v : data) s += v;
        return s;
    }

    double max_abs_diff(const Tensor& o) const {
        double m = 0.0;
        for (size_t i = 0; i < data.size(); ++i) {
            double d = std::abs(data[i] - o.data[i]);
            if (d > m) m = d;
        }
        return m;
    }
};

// Nearest-neighbour resize of a [H,W] grid; used for conditioning maps and
// for matching masks to latent / feature-map resolutions.
inline Tensor nearest_resize(const Tensor& src, int out_h, int out_w) {
    if (src.rank() != 2) throw ValidationError("nearest_resize: expected rank-2 grid");
    if (out_h < 1 || out_w < 1) throw ValidationError("nearest_resize: bad target size");
    const int h = src.shape[0], w = src.shape[1];
    Tensor out({out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        int sy = static_cast<int>((y + 0.5) * h / out_h);
        if (sy >= h) sy = h - 1;
        for (int x = 0; x < out_w; ++x) {
            int sx = static_cast<int>((x + 0.5) * w / out_w);
            if (sx >= w) sx = w - 1;
            out.at(y, x) = src.at(sy, sx);
        }
    }
    return out;
}

}  // namespace camo
