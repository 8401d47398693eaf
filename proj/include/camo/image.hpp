#pragma once

#include "camo/tensor.hpp"

namespace camo {

// sRGB image, [3,H,W], channels in [0,1].
struct RgbImage {
    Tensor chw;

    RgbImage() = default;
    explicit RgbImage(int h, int w) : chw(Tensor({3, h, w})) {}
    static RgbImage wrap(Tensor t) {
        RgbImage img;
        img.chw = std::move(t);
        img.validate();
        return img;
    }

    int height() const { return chw.shape[1]; }
    int width() const { return chw.shape[2]; }

    void validate() const {
        if (chw.rank() != 3 || chw.shape[0] != 3 || chw.shape[1] < 1 || chw.shape[2] < 1)
            throw ValidationError("RgbImage: expected [3,H,W] with H,W >= 1");
        for (double v : chw.data) {
            if (!std::isfinite(v)) throw ValidationError("RgbImage: non-finite value");
            if (v < 0.0 || v > 1.0) throw ValidationError("RgbImage: value outside [0,1]");
        }
    }
};

// CIELAB image, [3,H,W] with channels (L, a, b); L in [0,100].
struct LabImage {
    Tensor chw;

    LabImage() = default;
    explicit LabImage(int h, int w) : chw(Tensor({3, h, w})) {}

    int height() const { return chw.shape[1]; }
    int width() const { return chw.shape[2]; }

    void validate() const {
        if (chw.rank() != 3 || chw.shape[0] != 3)
            throw ValidationError("LabImage: expected [3,H,W]");
        const int64_t hw = static_cast<int64_t>(chw.shape[1]) * chw.shape[2];
        for (int64_t i = 0; i < hw; ++i) {
            const double l = chw.data[i];
            if (!std::isfinite(l) || l < 0.0 || l > 100.0)
                throw ValidationError("LabImage: L outside [0,100]");
        }
        for (int64_t i = hw; i < 3 * hw; ++i)
            if (!std::isfinite(chw.data[i])) throw ValidationError("LabImage: non-finite value");
    }
};

// Binary mask, [H,W], values exactly 0 or 1.
struct Mask {
    Tensor hw;

    Mask() = default;
    explicit Mask(int h, int w) : hw(Tensor({h, w})) {}
    static Mask wrap(Tensor t) {
        Mask m;
        m.hw = std::move(t);
        m.validate();
        return m;
    }

    int height() const { return hw.shape[0]; }
    int width() const { return hw.shape[1]; }
    int64_t count() const {
        int64_t c = 0;
        for (double v : hw.data) c += (v != 0.0);
        return c;
    }

    void validate() const {
        if (hw.rank() != 2) throw ValidationError("Mask: expected [H,W]");
        for (double v : hw.data)
            if (v != 0.0 && v != 1.0) throw ValidationError("Mask: values must be exactly 0 or 1");
    }
};

// Fractional coverage mask at a reduced resolution, values in [0,1].
struct FractionalMask {
    Tensor hw;

    FractionalMask() = default;
    explicit FractionalMask(int h, int w) : hw(Tensor({h, w})) {}

    int height() const { return hw.shape[0]; }
    int width() const { return hw.shape[1]; }

    void validate() const {
        if (hw.rank() != 2) throw ValidationError("FractionalMask: expected [H,W]");
        for (double v : hw.data)
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError("FractionalMask: values must lie in [0,1]");
    }
};

// Axis-aligned box in pixel coordinates.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double area() const { return w * h; }
    double x2() const { return x + w; }
    double y2() const { return y + h; }
};

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace camo
