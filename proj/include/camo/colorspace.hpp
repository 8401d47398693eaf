#pragma once

#include "camo/image.hpp"

namespace camo::colorspace {

// sRGB -> linear RGB -> XYZ (D65) -> CIELAB. Differentiable everywhere except
// the piecewise joints, where the lower-branch derivative is used.
LabImage rgb_to_lab(const RgbImage& img);

// Inverse of rgb_to_lab; output clamped to [0,1].
RgbImage lab_to_rgb(const LabImage& img);

// L/100, an [H,W] grid in [0,1].
Tensor normalized_l(const RgbImage& img);

// ((a+128)/255, (b+128)/255) stacked as [2,H,W].
Tensor normalized_ab(const RgbImage& img);

}  // namespace camo::colorspace
