#include "slrf/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "slrf/common.hpp"

namespace slrf {

Bbox mask_bbox(const Image& mask, int dilate) {
  int x0 = mask.width, y0 = mask.height, x1 = 0, y1 = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y, 0) > 0.5f) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x + 1);
        y1 = std::max(y1, y + 1);
      }
  if (x1 <= x0) return {0, 0, mask.width, mask.height};  // empty mask: whole image
  Bbox b{std::max(0, x0 - dilate), std::max(0, y0 - dilate),
         std::min(mask.width, x1 + dilate), std::min(mask.height, y1 + dilate)};
  return b;
}

double psnr(const Image& a, const Image& b, const Bbox& box) {
  if (!a.same_dims(b)) fail_usage("psnr: image dimensions differ");
  double se = 0.0;
  int64_t n = 0;
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      for (int c = 0; c < a.channels; ++c) {
        double d = static_cast<double>(a.at(x, y, c)) - b.at(x, y, c);
        se += d * d;
        ++n;
      }
  if (n == 0) fail_usage("psnr: empty crop");
  double mse = se / n;
  if (mse <= 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b, const Bbox& box) {
  if (!a.same_dims(b)) fail_usage("ssim: image dimensions differ");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;

  double kernel[kWin][kWin];
  double ksum = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      double dy = i - kWin / 2, dx = j - kWin / 2;
      kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      ksum += kernel[i][j];
    }
  for (auto& row : kernel)
    for (double& v : row) v /= ksum;

  // fall back to the full crop as a single window when it is too small
  int wx0 = box.x0, wy0 = box.y0;
  int wx1 = box.x1 - kWin + 1, wy1 = box.y1 - kWin + 1;
  if (wx1 <= wx0) { wx0 = box.x0; wx1 = wx0 + 1; }
  if (wy1 <= wy0) { wy0 = box.y0; wy1 = wy0 + 1; }

  double total = 0.0;
  int64_t count = 0;
  for (int c = 0; c < a.channels; ++c) {
    for (int wy = wy0; wy < wy1; ++wy)
      for (int wx = wx0; wx < wx1; ++wx) {
        double ma = 0, mb = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            int y = std::min(wy + i, a.height - 1);
            int x = std::min(wx + j, a.width - 1);
            ma += kernel[i][j] * a.at(x, y, c);
            mb += kernel[i][j] * b.at(x, y, c);
          }
        double va = 0, vb = 0, cov = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            int y = std::min(wy + i, a.height - 1);
            int x = std::min(wx + j, a.width - 1);
            double da = a.at(x, y, c) - ma;
            double db = b.at(x, y, c) - mb;
            va += kernel[i][j] * da * da;
            vb += kernel[i][j] * db * db;
            cov += kernel[i][j] * da * db;
          }
        double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
        ++count;
      }
  }
  return total / count;
}

}  // namespace slrf
