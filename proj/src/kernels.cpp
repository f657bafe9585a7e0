#include "extd/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace extd {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

[[noreturn]] void shape_error(const std::string& what) { throw std::invalid_argument(what); }

void check_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) shape_error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename T>
void check_conv_args(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const ConvSpec& spec) {
  spec.validate();
  if (input.c() != spec.in_channels) {
    shape_error("conv2d: input has " + std::to_string(input.c()) + " channels, spec expects " +
                std::to_string(spec.in_channels));
  }
  if (!(weights.shape() == spec.weight_shape())) {
    shape_error("conv2d: weights " + weights.shape().str() + " do not match " +
                spec.weight_shape().str());
  }
  if (input.h() + 2 * spec.padding < spec.kernel_h || input.w() + 2 * spec.padding < spec.kernel_w) {
    shape_error("conv2d: kernel larger than padded input");
  }
}

// Output columns [lo, hi] whose source column ox*stride - pad + k lies in [0, in).
void valid_span(int in, int out, int stride, int pad, int k, int& lo, int& hi) {
  const int need = pad - k;
  lo = need <= 0 ? 0 : (need + stride - 1) / stride;
  const int top = in - 1 + pad - k;
  hi = top < 0 ? -1 : std::min(out - 1, top / stride);
}

enum class ConvPath { Pointwise, Im2col, Direct };

ConvPath choose_path(const ConvSpec& s) {
  if (s.groups != 1) return ConvPath::Direct;
  if (s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.padding == 0) {
    return ConvPath::Pointwise;
  }
  return ConvPath::Im2col;
}

template <typename T>
void im2col(const T* in, int channels, int h, int w, const ConvSpec& s, int oh, int ow, T* col) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    const T* plane = in + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx, ++row) {
        T* dst = col + row * p;
        std::fill(dst, dst + p, T{});
        int lo = 0;
        int hi = 0;
        valid_span(w, ow, s.stride, s.padding, kx, lo, hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          T* d = dst + static_cast<std::size_t>(oy) * ow;
          for (int ox = lo; ox <= hi; ++ox) d[ox] = src[ox * s.stride - s.padding + kx];
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int channels, int h, int w, const ConvSpec& s, int oh, int ow,
                T* out) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    T* plane = out + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx, ++row) {
        const T* src = col + row * p;
        int lo = 0;
        int hi = 0;
        valid_span(w, ow, s.stride, s.padding, kx, lo, hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          if (iy < 0 || iy >= h) continue;
          T* d = plane + static_cast<std::size_t>(iy) * w;
          const T* g = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = lo; ox <= hi; ++ox) d[ox * s.stride - s.padding + kx] += g[ox];
        }
      }
    }
  }
}

// Stride-1 depthwise convolution on a zero-padded copy laid out with the
// padded row pitch, so every tap is one contiguous multiply-add sweep.
// Taps accumulate in the same (ky, kx) order as the generic loop.
bool flat_depthwise(const ConvSpec& s) {
  return s.stride == 1 && s.groups == s.in_channels && s.groups == s.out_channels;
}

template <typename T>
struct PaddedPlane {
  int pitch = 0, rows = 0;
  std::vector<T> buf;

  PaddedPlane(int h, int w, const ConvSpec& s)
      : pitch(w + 2 * s.padding), rows(h + 2 * s.padding),
        buf(static_cast<std::size_t>(rows) * pitch + s.kernel_w, T{}) {}

  void load(const T* plane, int h, int w, int pad) {
    for (int y = 0; y < h; ++y) {
      std::copy(plane + static_cast<std::size_t>(y) * w, plane + static_cast<std::size_t>(y + 1) * w,
                buf.begin() + static_cast<std::ptrdiff_t>((y + pad) * pitch + pad));
    }
  }
};

template <typename T>
void depthwise_flat(const BasicTensor<T>& in, const BasicTensor<T>& wt, const ConvSpec& s,
                    BasicTensor<T>& out) {
  const int oh = out.h(), ow = out.w();
  PaddedPlane<T> pad(in.h(), in.w(), s);
  const std::size_t span = static_cast<std::size_t>(oh) * pad.pitch;
  std::vector<T> acc(span);
  for (int n = 0; n < in.n(); ++n) {
    for (int c = 0; c < in.c(); ++c) {
      pad.load(in.plane(n, c), in.h(), in.w(), s.padding);
      std::fill(acc.begin(), acc.end(), T{});
      T* __restrict a = acc.data();
      for (int ky = 0; ky < s.kernel_h; ++ky) {
        for (int kx = 0; kx < s.kernel_w; ++kx) {
          const T wv = wt.at(c, 0, ky, kx);
          const T* __restrict src = pad.buf.data() + static_cast<std::size_t>(ky) * pad.pitch + kx;
          for (std::size_t i = 0; i < span; ++i) a[i] += wv * src[i];
        }
      }
      T* o = out.plane(n, c);
      for (int y = 0; y < oh; ++y) {
        std::copy(a + static_cast<std::size_t>(y) * pad.pitch, a + static_cast<std::size_t>(y) * pad.pitch + ow,
                  o + static_cast<std::size_t>(y) * ow);
      }
    }
  }
}

template <typename T>
T dot_lanes(const T* __restrict a, const T* __restrict b, std::size_t n);

template <typename T>
void depthwise_flat_vjp(const BasicTensor<T>& in, const BasicTensor<T>& wt, const ConvSpec& s,
                        const BasicTensor<T>& gout, BasicTensor<T>& gin, BasicTensor<T>& gw) {
  const int h = in.h(), w = in.w(), oh = gout.h(), ow = gout.w();
  PaddedPlane<T> pad(h, w, s);
  PaddedPlane<T> gpad(h, w, s);
  const std::size_t span = static_cast<std::size_t>(oh) * pad.pitch;
  std::vector<T> g(span, T{});  // upstream at the padded pitch; spare columns stay zero
  for (int n = 0; n < in.n(); ++n) {
    for (int c = 0; c < in.c(); ++c) {
      pad.load(in.plane(n, c), h, w, s.padding);
      const T* go = gout.plane(n, c);
      for (int y = 0; y < oh; ++y) {
        std::copy(go + static_cast<std::size_t>(y) * ow, go + static_cast<std::size_t>(y + 1) * ow,
                  g.begin() + static_cast<std::ptrdiff_t>(y * pad.pitch));
      }
      std::fill(gpad.buf.begin(), gpad.buf.end(), T{});
      const T* __restrict gs = g.data();
      for (int ky = 0; ky < s.kernel_h; ++ky) {
        for (int kx = 0; kx < s.kernel_w; ++kx) {
          const std::size_t off = static_cast<std::size_t>(ky) * pad.pitch + kx;
          const T wv = wt.at(c, 0, ky, kx);
          T* __restrict dst = gpad.buf.data() + off;
          for (std::size_t i = 0; i < span; ++i) dst[i] += wv * gs[i];
          gw.at(c, 0, ky, kx) += dot_lanes(gs, pad.buf.data() + off, span);
        }
      }
      T* gp = gin.plane(n, c);
      for (int y = 0; y < h; ++y) {
        const T* src = gpad.buf.data() + static_cast<std::size_t>(y + s.padding) * pad.pitch + s.padding;
        T* d = gp + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) d[x] += src[x];
      }
    }
  }
}

template <typename T>
void conv_direct(const BasicTensor<T>& in, const BasicTensor<T>& wt, const ConvSpec& s,
                 BasicTensor<T>& out) {
  const int cin_g = s.in_channels / s.groups;
  const int cout_g = s.out_channels / s.groups;
  const int h = in.h();
  const int w = in.w();
  const int oh = out.h();
  const int ow = out.w();
  for (int n = 0; n < in.n(); ++n) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const int g = oc / cout_g;
      T* o = out.plane(n, oc);
      for (int icg = 0; icg < cin_g; ++icg) {
        const T* ip = in.plane(n, g * cin_g + icg);
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            const T wv = wt.at(oc, icg, ky, kx);
            int lo = 0;
            int hi = 0;
            valid_span(w, ow, s.stride, s.padding, kx, lo, hi);
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s.stride - s.padding + ky;
              if (iy < 0 || iy >= h) continue;
              T* __restrict orow = o + static_cast<std::size_t>(oy) * ow;
              const T* __restrict irow = ip + static_cast<std::size_t>(iy) * w;
              if (s.stride == 1) {
                const int shift = kx - s.padding;
                for (int ox = lo; ox <= hi; ++ox) orow[ox] += wv * irow[ox + shift];
              } else {
                for (int ox = lo; ox <= hi; ++ox) {
                  orow[ox] += wv * irow[ox * s.stride - s.padding + kx];
                }
              }
            }
          }
        }
      }
    }
  }
}

// Dot product over eight interleaved partial sums (vectorisable, fixed order).
template <typename T>
T dot_lanes(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) lane[k] += a[i + k] * b[i + k];
  T tail{};
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
}

template <typename T>
void conv_direct_vjp(const BasicTensor<T>& in, const BasicTensor<T>& wt, const ConvSpec& s,
                     const BasicTensor<T>& gout, BasicTensor<T>& gin, BasicTensor<T>& gw) {
  const int cin_g = s.in_channels / s.groups;
  const int cout_g = s.out_channels / s.groups;
  const int h = in.h();
  const int w = in.w();
  const int oh = gout.h();
  const int ow = gout.w();
  for (int n = 0; n < in.n(); ++n) {
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const int g = oc / cout_g;
      const T* go = gout.plane(n, oc);
      for (int icg = 0; icg < cin_g; ++icg) {
        const int ic = g * cin_g + icg;
        const T* ip = in.plane(n, ic);
        T* gp = gin.plane(n, ic);
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            const T wv = wt.at(oc, icg, ky, kx);
            T acc{};
            int lo = 0;
            int hi = 0;
            valid_span(w, ow, s.stride, s.padding, kx, lo, hi);
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s.stride - s.padding + ky;
              if (iy < 0 || iy >= h) continue;
              const T* __restrict grow = go + static_cast<std::size_t>(oy) * ow;
              const T* __restrict irow = ip + static_cast<std::size_t>(iy) * w;
              T* __restrict girow = gp + static_cast<std::size_t>(iy) * w;
              if (s.stride == 1) {
                const int shift = kx - s.padding;
                for (int ox = lo; ox <= hi; ++ox) girow[ox + shift] += wv * grow[ox];
                acc += dot_lanes(grow + lo, irow + lo + shift, static_cast<std::size_t>(hi - lo + 1));
              } else {
                T row_acc{};
                for (int ox = lo; ox <= hi; ++ox) {
                  const int ix = ox * s.stride - s.padding + kx;
                  girow[ix] += wv * grow[ox];
                  row_acc += grow[ox] * irow[ix];
                }
                acc += row_acc;
              }
            }
            gw.at(oc, icg, ky, kx) += acc;
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const ConvSpec& spec, std::span<const T> bias) {
  check_conv_args(input, weights, spec);
  if (spec.has_bias && bias.size() != static_cast<std::size_t>(spec.out_channels)) {
    shape_error("conv2d: bias length does not match out_channels");
  }
  const int oh = spec.out_h(input.h());
  const int ow = spec.out_w(input.w());
  BasicTensor<T> out(input.n(), spec.out_channels, oh, ow);
  const std::size_t p = static_cast<std::size_t>(oh) * ow;

  switch (choose_path(spec)) {
    case ConvPath::Pointwise: {
      ConstMap<T> wm(weights.raw(), spec.out_channels, spec.in_channels);
      for (int n = 0; n < input.n(); ++n) {
        ConstMap<T> x(input.plane(n, 0), spec.in_channels, static_cast<Eigen::Index>(p));
        MutMap<T> y(out.plane(n, 0), spec.out_channels, static_cast<Eigen::Index>(p));
        y.noalias() = wm * x;
      }
      break;
    }
    case ConvPath::Im2col: {
      const Eigen::Index k = static_cast<Eigen::Index>(spec.in_channels) * spec.kernel_h * spec.kernel_w;
      std::vector<T> col(static_cast<std::size_t>(k) * p);
      ConstMap<T> wm(weights.raw(), spec.out_channels, k);
      for (int n = 0; n < input.n(); ++n) {
        im2col(input.plane(n, 0), spec.in_channels, input.h(), input.w(), spec, oh, ow, col.data());
        ConstMap<T> x(col.data(), k, static_cast<Eigen::Index>(p));
        MutMap<T> y(out.plane(n, 0), spec.out_channels, static_cast<Eigen::Index>(p));
        y.noalias() = wm * x;
      }
      break;
    }
    case ConvPath::Direct:
      if (flat_depthwise(spec)) {
        depthwise_flat(input, weights, spec, out);
      } else {
        conv_direct(input, weights, spec, out);
      }
      break;
  }

  if (spec.has_bias) {
    for (int n = 0; n < out.n(); ++n) {
      for (int c = 0; c < out.c(); ++c) {
        T* o = out.plane(n, c);
        for (std::size_t i = 0; i < p; ++i) o[i] += bias[c];
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_vjp(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                        const ConvSpec& spec, const BasicTensor<T>& upstream) {
  check_conv_args(input, weights, spec);
  const Shape expected{input.n(), spec.out_channels, spec.out_h(input.h()), spec.out_w(input.w())};
  check_same(upstream.shape(), expected, "conv2d_vjp");

  ConvGrads<T> g{BasicTensor<T>::zeros_like(input), BasicTensor<T>(spec.weight_shape()), {}};
  const int oh = expected.h;
  const int ow = expected.w;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;

  switch (choose_path(spec)) {
    case ConvPath::Pointwise: {
      ConstMap<T> wm(weights.raw(), spec.out_channels, spec.in_channels);
      MutMap<T> gw(g.weights.raw(), spec.out_channels, spec.in_channels);
      for (int n = 0; n < input.n(); ++n) {
        ConstMap<T> x(input.plane(n, 0), spec.in_channels, static_cast<Eigen::Index>(p));
        ConstMap<T> gy(upstream.plane(n, 0), spec.out_channels, static_cast<Eigen::Index>(p));
        MutMap<T> gx(g.input.plane(n, 0), spec.in_channels, static_cast<Eigen::Index>(p));
        gx.noalias() = wm.transpose() * gy;
        gw.noalias() += gy * x.transpose();
      }
      break;
    }
    case ConvPath::Im2col: {
      const Eigen::Index k = static_cast<Eigen::Index>(spec.in_channels) * spec.kernel_h * spec.kernel_w;
      std::vector<T> col(static_cast<std::size_t>(k) * p);
      std::vector<T> gcol(static_cast<std::size_t>(k) * p);
      ConstMap<T> wm(weights.raw(), spec.out_channels, k);
      MutMap<T> gw(g.weights.raw(), spec.out_channels, k);
      for (int n = 0; n < input.n(); ++n) {
        im2col(input.plane(n, 0), spec.in_channels, input.h(), input.w(), spec, oh, ow, col.data());
        ConstMap<T> x(col.data(), k, static_cast<Eigen::Index>(p));
        ConstMap<T> gy(upstream.plane(n, 0), spec.out_channels, static_cast<Eigen::Index>(p));
        MutMap<T> gx(gcol.data(), k, static_cast<Eigen::Index>(p));
        gx.noalias() = wm.transpose() * gy;
        gw.noalias() += gy * x.transpose();
        col2im_add(gcol.data(), spec.in_channels, input.h(), input.w(), spec, oh, ow,
                   g.input.plane(n, 0));
      }
      break;
    }
    case ConvPath::Direct:
      if (flat_depthwise(spec)) {
        depthwise_flat_vjp(input, weights, spec, upstream, g.input, g.weights);
      } else {
        conv_direct_vjp(input, weights, spec, upstream, g.input, g.weights);
      }
      break;
  }

  if (spec.has_bias) {
    g.bias.assign(spec.out_channels, T{});
    for (int n = 0; n < upstream.n(); ++n) {
      for (int c = 0; c < upstream.c(); ++c) {
        const T* go = upstream.plane(n, c);
        T acc{};
        for (std::size_t i = 0; i < p; ++i) acc += go[i];
        g.bias[c] += acc;
      }
    }
  }
  return g;
}

namespace {

// Double-precision sums with four independent chains so the loop is not bound
// by add latency. Fixed association order, so results are deterministic.
template <typename T, typename F>
double chained_sum(std::size_t n, F term) {
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    a0 += term(i);
    a1 += term(i + 1);
    a2 += term(i + 2);
    a3 += term(i + 3);
  }
  for (; i < n; ++i) a0 += term(i);
  return (a0 + a1) + (a2 + a3);
}

}  // namespace

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, BatchNormState<T>& state,
                          BatchNormCache<T>* cache) {
  const auto channels = static_cast<std::size_t>(input.c());
  if (state.gamma.size() != channels || state.beta.size() != channels ||
      state.running_mean.size() != channels || state.running_var.size() != channels) {
    shape_error("batch_norm: state vectors do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t p = input.shape().plane();
  const std::size_t count = p * input.n();
  BasicTensor<T> out = BasicTensor<T>::zeros_like(input);
  BasicTensor<T> x_hat = cache ? BasicTensor<T>::zeros_like(input) : BasicTensor<T>();
  std::vector<double> inv_std(channels);

  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (state.mode == BnMode::Train) {
      for (int n = 0; n < input.n(); ++n) {
        const T* x = input.plane(n, static_cast<int>(c));
        mean += chained_sum<T>(p, [x](std::size_t i) { return static_cast<double>(x[i]); });
      }
      mean /= static_cast<double>(count);
      for (int n = 0; n < input.n(); ++n) {
        const T* x = input.plane(n, static_cast<int>(c));
        var += chained_sum<T>(p, [x, mean](std::size_t i) {
          const double d = x[i] - mean;
          return d * d;
        });
      }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      const double m = state.momentum;
      state.running_mean[c] = static_cast<T>((1.0 - m) * state.running_mean[c] + m * mean);
      state.running_var[c] = static_cast<T>((1.0 - m) * state.running_var[c] + m * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + state.eps);
    inv_std[c] = is;
    const T gamma = state.gamma[c];
    const T beta = state.beta[c];
    const T mu = static_cast<T>(mean);
    const T sc = static_cast<T>(is);
    for (int n = 0; n < input.n(); ++n) {
      const T* __restrict x = input.plane(n, static_cast<int>(c));
      T* __restrict y = out.plane(n, static_cast<int>(c));
      if (cache) {
        T* __restrict xh = x_hat.plane(n, static_cast<int>(c));
        for (std::size_t i = 0; i < p; ++i) {
          xh[i] = (x[i] - mu) * sc;
          y[i] = gamma * xh[i] + beta;
        }
      } else {
        for (std::size_t i = 0; i < p; ++i) y[i] = gamma * ((x[i] - mu) * sc) + beta;
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->mode = state.mode;
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batch_norm_vjp(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                 const BasicTensor<T>& upstream) {
  check_same(upstream.shape(), cache.x_hat.shape(), "batch_norm_vjp");
  const auto channels = static_cast<std::size_t>(upstream.c());
  if (gamma.size() != channels) shape_error("batch_norm_vjp: gamma length mismatch");
  const std::size_t p = upstream.shape().plane();
  const double count = static_cast<double>(p * upstream.n());

  BatchNormGrads<T> g{BasicTensor<T>::zeros_like(upstream), std::vector<T>(channels),
                      std::vector<T>(channels)};
  for (std::size_t c = 0; c < channels; ++c) {
    const int ci = static_cast<int>(c);
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int n = 0; n < upstream.n(); ++n) {
      const T* gy = upstream.plane(n, ci);
      const T* xh = cache.x_hat.plane(n, ci);
      sum_g += chained_sum<T>(p, [gy](std::size_t i) { return static_cast<double>(gy[i]); });
      sum_gx += chained_sum<T>(p, [gy, xh](std::size_t i) { return static_cast<double>(gy[i]) * xh[i]; });
    }
    g.gamma[c] = static_cast<T>(sum_gx);
    g.beta[c] = static_cast<T>(sum_g);
    const double gm = gamma[c];
    const double is = cache.inv_std[c];
    for (int n = 0; n < upstream.n(); ++n) {
      const T* gy = upstream.plane(n, ci);
      const T* xh = cache.x_hat.plane(n, ci);
      T* __restrict gx = g.input.plane(n, ci);
      if (cache.mode == BnMode::Train) {
        // k * (count*gy - sum_g - xh*sum_gx), folded per channel.
        const T a = static_cast<T>(gm * is);
        const T b = static_cast<T>(gm * is * sum_g / count);
        const T d = static_cast<T>(gm * is * sum_gx / count);
        for (std::size_t i = 0; i < p; ++i) gx[i] = a * gy[i] - b - d * xh[i];
      } else {
        const T a = static_cast<T>(gm * is);
        for (std::size_t i = 0; i < p; ++i) gx[i] = gy[i] * a;
      }
    }
  }
  return g;
}

namespace {

template <typename T>
std::vector<T> channel_slopes(ActKind kind, std::span<const T> slopes, int channels) {
  switch (kind) {
    case ActKind::Relu:
      return std::vector<T>(channels, T{0});
    case ActKind::LeakyRelu:
      return std::vector<T>(channels, static_cast<T>(kNegativeSlope));
    case ActKind::PRelu:
      if (slopes.size() != static_cast<std::size_t>(channels)) {
        shape_error("activation: PReLU needs one slope per channel");
      }
      return std::vector<T>(slopes.begin(), slopes.end());
  }
  return {};
}

}  // namespace

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, ActKind kind, std::span<const T> slopes) {
  const std::vector<T> s = channel_slopes(kind, slopes, input.c());
  BasicTensor<T> out = BasicTensor<T>::zeros_like(input);
  const std::size_t p = input.shape().plane();
  for (int n = 0; n < input.n(); ++n) {
    for (int c = 0; c < input.c(); ++c) {
      const T* __restrict x = input.plane(n, c);
      T* __restrict y = out.plane(n, c);
      const T a = s[c];
      // Branch-free form; exact for both signs (x + a*0 == x, 0 + a*x == a*x).
      for (std::size_t i = 0; i < p; ++i) y[i] = std::max(x[i], T{0}) + a * std::min(x[i], T{0});
    }
  }
  return out;
}

template <typename T>
ActivationGrads<T> activation_vjp(const BasicTensor<T>& input, ActKind kind,
                                  std::span<const T> slopes, const BasicTensor<T>& upstream) {
  check_same(input.shape(), upstream.shape(), "activation_vjp");
  const std::vector<T> s = channel_slopes(kind, slopes, input.c());
  ActivationGrads<T> g{BasicTensor<T>::zeros_like(input), {}};
  if (kind == ActKind::PRelu) g.slopes.assign(input.c(), T{});
  const std::size_t p = input.shape().plane();
  for (int n = 0; n < input.n(); ++n) {
    for (int c = 0; c < input.c(); ++c) {
      const T* __restrict x = input.plane(n, c);
      const T* __restrict gy = upstream.plane(n, c);
      T* __restrict gx = g.input.plane(n, c);
      const T a = s[c];
      for (std::size_t i = 0; i < p; ++i) gx[i] = gy[i] * (x[i] >= T{0} ? T{1} : a);
      T acc{};
      if (kind == ActKind::PRelu) {
        for (std::size_t i = 0; i < p; ++i) acc += gy[i] * std::min(x[i], T{0});
      }
      if (kind == ActKind::PRelu) g.slopes[c] += acc;
    }
  }
  return g;
}

namespace {

struct Tap {
  int i0;
  int i1;
  double w0;
  double w1;
};

std::vector<Tap> upsample_taps(int in) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * 2);
  for (int o = 0; o < 2 * in; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double w1 = src - i0;
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> upsample_bilinear_x2(const BasicTensor<T>& input) {
  const int h = input.h();
  const int w = input.w();
  BasicTensor<T> out(input.n(), input.c(), 2 * h, 2 * w);
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  for (int n = 0; n < input.n(); ++n) {
    for (int c = 0; c < input.c(); ++c) {
      const T* x = input.plane(n, c);
      T* y = out.plane(n, c);
      for (int oy = 0; oy < 2 * h; ++oy) {
        const Tap& a = ty[oy];
        const T* r0 = x + static_cast<std::size_t>(a.i0) * w;
        const T* r1 = x + static_cast<std::size_t>(a.i1) * w;
        T* yr = y + static_cast<std::size_t>(oy) * 2 * w;
        for (int ox = 0; ox < 2 * w; ++ox) {
          const Tap& b = tx[ox];
          const double top = b.w0 * r0[b.i0] + b.w1 * r0[b.i1];
          const double bot = b.w0 * r1[b.i0] + b.w1 * r1[b.i1];
          yr[ox] = static_cast<T>(a.w0 * top + a.w1 * bot);
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_x2_vjp(const Shape& input_shape, const BasicTensor<T>& upstream) {
  const int h = input_shape.h;
  const int w = input_shape.w;
  check_same(upstream.shape(), Shape{input_shape.n, input_shape.c, 2 * h, 2 * w},
             "upsample_bilinear_x2_vjp");
  BasicTensor<T> g(input_shape);
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  for (int n = 0; n < input_shape.n; ++n) {
    for (int c = 0; c < input_shape.c; ++c) {
      const T* gy = upstream.plane(n, c);
      T* gx = g.plane(n, c);
      for (int oy = 0; oy < 2 * h; ++oy) {
        const Tap& a = ty[oy];
        T* r0 = gx + static_cast<std::size_t>(a.i0) * w;
        T* r1 = gx + static_cast<std::size_t>(a.i1) * w;
        const T* gr = gy + static_cast<std::size_t>(oy) * 2 * w;
        for (int ox = 0; ox < 2 * w; ++ox) {
          const Tap& b = tx[ox];
          const double v = gr[ox];
          r0[b.i0] += static_cast<T>(a.w0 * b.w0 * v);
          r0[b.i1] += static_cast<T>(a.w0 * b.w1 * v);
          r1[b.i0] += static_cast<T>(a.w1 * b.w0 * v);
          r1[b.i1] += static_cast<T>(a.w1 * b.w1 * v);
        }
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out = a;
  add_into(out, b);
  return out;
}

template <typename T>
void add_into(BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_same(a.shape(), b.shape(), "add");
  T* x = a.raw();
  const T* y = b.raw();
  for (std::size_t i = 0; i < a.size(); ++i) x[i] += y[i];
}

template <typename T>
BasicTensor<T> maxout_pairless(const BasicTensor<T>& input, int bg_channels) {
  if (bg_channels < 1 || input.c() != bg_channels + 1) {
    shape_error("maxout_pairless: expected " + std::to_string(bg_channels + 1) +
                " channels, got " + std::to_string(input.c()));
  }
  BasicTensor<T> out(input.n(), 2, input.h(), input.w());
  const std::size_t p = input.shape().plane();
  for (int n = 0; n < input.n(); ++n) {
    T* bg = out.plane(n, 0);
    std::copy_n(input.plane(n, 0), p, bg);
    for (int c = 1; c < bg_channels; ++c) {
      const T* x = input.plane(n, c);
      for (std::size_t i = 0; i < p; ++i) {
        if (x[i] > bg[i]) bg[i] = x[i];
      }
    }
    std::copy_n(input.plane(n, bg_channels), p, out.plane(n, 1));
  }
  return out;
}

template <typename T>
BasicTensor<T> maxout_pairless_vjp(const BasicTensor<T>& input, int bg_channels,
                                   const BasicTensor<T>& upstream) {
  if (bg_channels < 1 || input.c() != bg_channels + 1) {
    shape_error("maxout_pairless_vjp: channel count mismatch");
  }
  check_same(upstream.shape(), Shape{input.n(), 2, input.h(), input.w()}, "maxout_pairless_vjp");
  BasicTensor<T> g = BasicTensor<T>::zeros_like(input);
  const std::size_t p = input.shape().plane();
  std::vector<int> arg(p);
  for (int n = 0; n < input.n(); ++n) {
    std::fill(arg.begin(), arg.end(), 0);
    const T* first = input.plane(n, 0);
    std::vector<T> best(first, first + p);
    for (int c = 1; c < bg_channels; ++c) {
      const T* x = input.plane(n, c);
      for (std::size_t i = 0; i < p; ++i) {
        if (x[i] > best[i]) {
          best[i] = x[i];
          arg[i] = c;
        }
      }
    }
    const T* gbg = upstream.plane(n, 0);
    for (std::size_t i = 0; i < p; ++i) g.plane(n, arg[i])[i] += gbg[i];
    std::copy_n(upstream.plane(n, 1), p, g.plane(n, bg_channels));
  }
  return g;
}

#define EXTD_INSTANTIATE_KERNELS(T)                                                             \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const ConvSpec&, \
                                 std::span<const T>);                                          \
  template ConvGrads<T> conv2d_vjp(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                   const ConvSpec&, const BasicTensor<T>&);                    \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, BatchNormState<T>&,                \
                                     BatchNormCache<T>*);                                      \
  template BatchNormGrads<T> batch_norm_vjp(const BatchNormCache<T>&, std::span<const T>,      \
                                            const BasicTensor<T>&);                            \
  template BasicTensor<T> activation(const BasicTensor<T>&, ActKind, std::span<const T>);      \
  template ActivationGrads<T> activation_vjp(const BasicTensor<T>&, ActKind,                   \
                                             std::span<const T>, const BasicTensor<T>&);       \
  template BasicTensor<T> upsample_bilinear_x2(const BasicTensor<T>&);                         \
  template BasicTensor<T> upsample_bilinear_x2_vjp(const Shape&, const BasicTensor<T>&);       \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template void add_into(BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> maxout_pairless(const BasicTensor<T>&, int);                         \
  template BasicTensor<T> maxout_pairless_vjp(const BasicTensor<T>&, int, const BasicTensor<T>&);

EXTD_INSTANTIATE_KERNELS(float)
EXTD_INSTANTIATE_KERNELS(double)

#undef EXTD_INSTANTIATE_KERNELS

}  // namespace extd
