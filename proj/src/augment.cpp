#include "extd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace extd {

Tensor resize_window(const Tensor& image, double x0, double y0, double w, double h, int out_h,
                     int out_w) {
  if (w <= 0 || h <= 0 || out_h <= 0 || out_w <= 0) {
    throw std::invalid_argument("resize_window: empty window or output");
  }
  const int ih = image.h(), iw = image.w();
  Tensor out(image.n(), image.c(), out_h, out_w);
  const double sy = h / out_h, sx = w / out_w;
  std::vector<int> xa(out_w), xb(out_w);
  std::vector<float> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double src = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, static_cast<double>(iw - 1));
    xa[x] = static_cast<int>(std::floor(src));
    xb[x] = std::min(xa[x] + 1, iw - 1);
    fx[x] = static_cast<float>(src - xa[x]);
  }
  for (int n = 0; n < image.n(); ++n)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < out_h; ++y) {
        const double src = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, static_cast<double>(ih - 1));
        const int ya = static_cast<int>(std::floor(src));
        const int yb = std::min(ya + 1, ih - 1);
        const float fy = static_cast<float>(src - ya);
        for (int x = 0; x < out_w; ++x) {
          const float top = image.at(n, c, ya, xa[x]) * (1 - fx[x]) + image.at(n, c, ya, xb[x]) * fx[x];
          const float bot = image.at(n, c, yb, xa[x]) * (1 - fx[x]) + image.at(n, c, yb, xb[x]) * fx[x];
          out.at(n, c, y, x) = top * (1 - fy) + bot * fy;
        }
      }
  return out;
}

std::vector<Box> crop_boxes(const std::vector<Box>& boxes, const Box& win) {
  std::vector<Box> out;
  for (const auto& b : boxes) {
    const double bx = b.cx(), by = b.cy();
    if (bx < win.x || bx >= win.x + win.w || by < win.y || by >= win.y + win.h) continue;
    const double l = std::max(b.x, win.x), t = std::max(b.y, win.y);
    const double r = std::min(b.x + b.w, win.x + win.w), btm = std::min(b.y + b.h, win.y + win.h);
    out.push_back({l - win.x, t - win.y, r - l, btm - t});
  }
  return out;
}

Sample flip_horizontal(const Sample& s) {
  Sample out{Tensor::zeros_like(s.image), {}};
  const int w = s.image.w();
  for (int n = 0; n < s.image.n(); ++n)
    for (int c = 0; c < s.image.c(); ++c)
      for (int y = 0; y < s.image.h(); ++y)
        for (int x = 0; x < w; ++x) out.image.at(n, c, y, x) = s.image.at(n, c, y, w - 1 - x);
  for (const auto& b : s.boxes) out.boxes.push_back({w - b.x - b.w, b.y, b.w, b.h});
  return out;
}

Sample flip_vertical(const Sample& s) {
  Sample out{Tensor::zeros_like(s.image), {}};
  const int h = s.image.h();
  for (int n = 0; n < s.image.n(); ++n)
    for (int c = 0; c < s.image.c(); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < s.image.w(); ++x) out.image.at(n, c, y, x) = s.image.at(n, c, h - 1 - y, x);
  for (const auto& b : s.boxes) out.boxes.push_back({b.x, h - b.y - b.h, b.w, b.h});
  return out;
}

namespace {

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0f;
  if (d <= 0) {
    h = 0;
  } else if (mx == r) {
    h = 60.0f * std::fmod((g - b) / d, 6.0f);
  } else if (mx == g) {
    h = 60.0f * ((b - r) / d + 2.0f);
  } else {
    h = 60.0f * ((r - g) / d + 4.0f);
  }
  if (h < 0) h += 360.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float c = v * s;
  const float hp = h / 60.0f;
  const float x = c * (1 - std::abs(std::fmod(hp, 2.0f) - 1));
  float r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r1 = c; g1 = x; break;
    case 1: r1 = x; g1 = c; break;
    case 2: g1 = c; b1 = x; break;
    case 3: g1 = x; b1 = c; break;
    case 4: r1 = x; b1 = c; break;
    default: r1 = c; b1 = x; break;
  }
  const float m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

}  // namespace

void photometric_distort(Tensor& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (image.c() != 3) throw std::invalid_argument("photometric_distort: expected 3 channels");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto coin = [&] { return u(rng) < cfg.photometric_prob; };
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  // Draw every decision up front so the stream does not depend on pixel data.
  const bool do_b = coin();
  const double delta = range(-cfg.brightness, cfg.brightness);
  const bool do_c = coin();
  const double alpha = range(cfg.contrast_lo, cfg.contrast_hi);
  const bool do_s = coin();
  const double sat = range(cfg.saturation_lo, cfg.saturation_hi);
  const bool do_h = coin();
  const double hue = range(-cfg.hue_degrees, cfg.hue_degrees);

  auto px = image.data();
  if (do_b)
    for (auto& v : px) v += static_cast<float>(delta);
  if (do_c)
    for (auto& v : px) v *= static_cast<float>(alpha);
  for (auto& v : px) v = std::clamp(v, 0.0f, 1.0f);
  if (do_s || do_h) {
    for (int n = 0; n < image.n(); ++n)
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x) {
          float& r = image.at(n, 0, y, x);
          float& g = image.at(n, 1, y, x);
          float& b = image.at(n, 2, y, x);
          float h, s, v;
          rgb_to_hsv(r, g, b, h, s, v);
          if (do_s) s = std::clamp(s * static_cast<float>(sat), 0.0f, 1.0f);
          if (do_h) {
            h += static_cast<float>(hue);
            if (h < 0) h += 360.0f;
            if (h >= 360.0f) h -= 360.0f;
          }
          hsv_to_rgb(h, s, v, r, g, b);
        }
  }
  for (auto& v : px) v = std::clamp(v, 0.0f, 1.0f);
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (sample.image.n() != 1 || sample.image.c() != 3) {
    throw std::invalid_argument("augment: expected a single 3-channel image, got " +
                                sample.image.shape().str());
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double H = sample.image.h(), W = sample.image.w();

  Tensor image = sample.image;
  if (cfg.photometric) photometric_distort(image, cfg, rng);

  // Crop window, defaulting to the whole image.
  double cx0 = 0, cy0 = 0, cw = W, ch = H;
  std::vector<Box> kept;
  for (const auto& b : sample.boxes) {
    const double l = std::max(b.x, 0.0), t = std::max(b.y, 0.0);
    const Box c{l, t, std::min(b.x + b.w, W) - l, std::min(b.y + b.h, H) - t};
    if (c.valid()) kept.push_back(c);
  }
  if (cfg.crop) {
    const double short_side = std::min(H, W);
    bool found = false;
    for (int t = 0; t < cfg.crop_tries && !found; ++t) {
      const double side = short_side * (cfg.crop_lo + (cfg.crop_hi - cfg.crop_lo) * u(rng));
      const double x0 = std::floor(u(rng) * (W - side + 1.0));
      const double y0 = std::floor(u(rng) * (H - side + 1.0));
      const double x0c = std::min(x0, W - side), y0c = std::min(y0, H - side);
      std::vector<Box> in = crop_boxes(sample.boxes, Box{x0c, y0c, side, side});
      if (!in.empty() || sample.boxes.empty()) {
        cx0 = x0c;
        cy0 = y0c;
        cw = ch = side;
        kept = std::move(in);
        found = true;
      }
    }
  }

  const int res = cfg.resolution;
  Sample out;
  if (cx0 == 0 && cy0 == 0 && cw == W && ch == H && image.h() == res && image.w() == res) {
    out.image = std::move(image);
  } else {
    out.image = resize_window(image, cx0, cy0, cw, ch, res, res);
  }
  const double sx = res / cw, sy = res / ch;
  for (const auto& b : kept) {
    Box r{b.x * sx, b.y * sy, b.w * sx, b.h * sy};
    if (r.valid()) out.boxes.push_back(r);
  }

  if (u(rng) < cfg.hflip_prob) out = flip_horizontal(out);
  if (u(rng) < cfg.vflip_prob) out = flip_vertical(out);
  return out;
}

}  // namespace extd
