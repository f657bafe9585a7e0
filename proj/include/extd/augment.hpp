#pragma once

#include <random>
#include <vector>

#include "extd/anchors.hpp"
#include "extd/tensor.hpp"

namespace extd {

/// One image (1x3xHxW, values in [0,1]) with its face boxes.
struct Sample {
  Tensor image;
  std::vector<Box> boxes;
};

struct AugmentConfig {
  int resolution = 640;  // output side
  bool photometric = true;
  double photometric_prob = 0.5;
  double brightness = 32.0 / 255.0;
  double contrast_lo = 0.5, contrast_hi = 1.5;
  double saturation_lo = 0.5, saturation_hi = 1.5;
  double hue_degrees = 18.0;
  bool crop = true;
  double crop_lo = 0.3, crop_hi = 1.0;  // fraction of the short side
  int crop_tries = 50;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;  // set to 0 to disable vertical flips
};

/// Bilinear resample of the window (x0, y0, w, h) of `image` onto out_h x out_w.
Tensor resize_window(const Tensor& image, double x0, double y0, double w, double h, int out_h,
                     int out_w);

/// Boxes whose centre lies inside `window`, clipped to it, in window coordinates.
std::vector<Box> crop_boxes(const std::vector<Box>& boxes, const Box& window);

Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);

/// Colour distortion in place: brightness, contrast, saturation, hue.
void photometric_distort(Tensor& image, const AugmentConfig& config, std::mt19937_64& rng);

/// Photometric distortion, square crop rescaled to `resolution`, then flips.
/// Boxes whose centre falls outside the crop are dropped; the rest are clipped.
Sample augment(const Sample& sample, const AugmentConfig& config, std::mt19937_64& rng);

}  // namespace extd
