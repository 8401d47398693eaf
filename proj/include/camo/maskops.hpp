#pragma once

#include "camo/image.hpp"

namespace camo::maskops {

// Morphological dilation with a square structuring element of side kernel_px
// (odd, >= 1). Zero padding outside the frame.
Mask dilate(const Mask& m, int kernel_px);

// dilate(m, kernel_px) AND NOT m.
Mask annulus(const Mask& m, int kernel_px);

// Area-average pooling over factor x factor blocks. H and W must divide.
FractionalMask downsample_mask(const Mask& m, int factor);

// 1 where value > threshold (strict), else 0.
Mask binarize(const FractionalMask& fm, double threshold);

// fg*m + bg*(1-m).
RgbImage composite(const RgbImage& fg, const RgbImage& bg, const Mask& m);

}  // namespace camo::maskops
