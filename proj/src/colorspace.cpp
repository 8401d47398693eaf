#include "camo/colorspace.hpp"

#include "camo/autodiff.hpp"

namespace camo::colorspace {

LabImage rgb_to_lab(const RgbImage& img) {
    img.validate();
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    LabImage out(h, w);
    for (int64_t i = 0; i < hw; ++i) {
        const double rgb[3] = {img.chw.data[i], img.chw.data[hw + i], img.chw.data[2 * hw + i]};
        double lab[3];
        lab_from_rgb_pixel(rgb, lab);
        out.chw.data[i] = lab[0];
        out.chw.data[hw + i] = lab[1];
        out.chw.data[2 * hw + i] = lab[2];
    }
    return out;
}

RgbImage lab_to_rgb(const LabImage& img) {
    img.validate();
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    RgbImage out(h, w);
    for (int64_t i = 0; i < hw; ++i) {
        const double lab[3] = {img.chw.data[i], img.chw.data[hw + i], img.chw.data[2 * hw + i]};
        double rgb[3];
        rgb_from_lab_pixel(lab, rgb);
        out.chw.data[i] = rgb[0];
        out.chw.data[hw + i] = rgb[1];
        out.chw.data[2 * hw + i] = rgb[2];
    }
    return out;
}

// The affine forms below match the training-graph ops bit for bit, so the
// loss fixed points land exactly on zero.
Tensor normalized_l(const RgbImage& img) {
    LabImage lab = rgb_to_lab(img);
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({h, w});
    for (int64_t i = 0; i < hw; ++i) out.data[i] = lab.chw.data[i] * 0.01 + 0.0;
    return out;
}

Tensor normalized_ab(const RgbImage& img) {
    LabImage lab = rgb_to_lab(img);
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({2, h, w});
    for (int64_t i = 0; i < hw; ++i) {
        out.data[i] = lab.chw.data[hw + i] * (1.0 / 255.0) + 128.0 / 255.0;
        out.data[hw + i] = lab.chw.data[2 * hw + i] * (1.0 / 255.0) + 128.0 / 255.0;
    }
    return out;
}

}  // namespace camo::colorspace
