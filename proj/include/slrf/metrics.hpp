#pragma once

#include "slrf/image.hpp"

namespace slrf {

struct Bbox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

// Bounding box of the nonzero mask pixels, dilated and clamped to the image.
Bbox mask_bbox(const Image& mask, int dilate = 10);

// PSNR over the crop, 10·log10(1/MSE) on [0,1] floats. Identical crops
// return the 99 dB sentinel.
double psnr(const Image& a, const Image& b, const Bbox& box);
constexpr double kPsnrSentinel = 99.0;

// Mean SSIM over fully-interior 11x11 Gaussian windows (σ=1.5,
// C1=0.01², C2=0.03²), averaged over channels.
double ssim(const Image& a, const Image& b, const Bbox& box);

}  // namespace slrf
