#include "camo/maskops.hpp"

namespace camo::maskops {

Mask dilate(const Mask& m, int kernel_px) {
    m.validate();
    if (kernel_px < 1 || kernel_px % 2 == 0)
        throw ValidationError("dilate: kernel_px must be odd and positive");
    const int h = m.height(), w = m.width();
    const int r = kernel_px / 2;
    // Separable max filter: rows then columns.
    Tensor tmp({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = 0.0;
            const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
            for (int xx = x0; xx <= x1 && v == 0.0; ++xx) v = m.hw.at(y, xx);
            tmp.at(y, x) = v;
        }
    Mask out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = 0.0;
            const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
            for (int yy = y0; yy <= y1 && v == 0.0; ++yy) v = tmp.at(yy, x);
            out.hw.at(y, x) = v;
        }
    return out;
}

Mask annulus(const Mask& m, int kernel_px) {
    Mask d = dilate(m, kernel_px);
    for (size_t i = 0; i < d.hw.data.size(); ++i)
        if (m.hw.data[i] != 0.0) d.hw.data[i] = 0.0;
    return d;
}

FractionalMask downsample_mask(const Mask& m, int factor) {
    m.validate();
    if (factor < 1) throw ValidationError("downsample_mask: factor must be positive");
    const int h = m.height(), w = m.width();
    if (h % factor != 0 || w % factor != 0)
        throw ValidationError("downsample_mask: shape not divisible by factor");
    const int oh = h / factor, ow = w / factor;
    FractionalMask out(oh, ow);
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) s += m.hw.at(y * factor + dy, x * factor + dx);
            out.hw.at(y, x) = s * inv;
        }
    return out;
}

Mask binarize(const FractionalMask& fm, double threshold) {
    fm.validate();
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ValidationError("binarize: threshold must lie in (0,1)");
    Mask out(fm.height(), fm.width());
    for (size_t i = 0; i < fm.hw.data.size(); ++i)
        out.hw.data[i] = fm.hw.data[i] > threshold ? 1.0 : 0.0;
    return out;
}

RgbImage composite(const RgbImage& fg, const RgbImage& bg, const Mask& m) {
    fg.validate();
    bg.validate();
    m.validate();
    if (fg.height() != bg.height() || fg.width() != bg.width() || fg.height() != m.height() ||
        fg.width() != m.width())
        throw ValidationError("composite: shape mismatch");
    const int64_t hw = static_cast<int64_t>(fg.height()) * fg.width();
    RgbImage out(fg.height(), fg.width());
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i) {
            const double mv = m.hw.data[i];
            out.chw.data[c * hw + i] =
                fg.chw.data[c * hw + i] * mv + bg.chw.data[c * hw + i] * (1.0 - mv);
        }
    return out;
}

}  // namespace camo::maskops
