#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>

#include <Eigen/Dense>
#include <memory>
#include <numeric>

#include "litediff/tensor.hpp"

namespace litediff {

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w;    // input
  std::size_t o, kh, kw;     // kernel
  std::size_t oh, ow;        // output
  std::size_t stride, pad;

  // Output columns [lo, hi) whose input column ow*stride + kx - pad is in range.
  std::pair<std::size_t, std::size_t> col_range(std::size_t kx) const {
    const auto s = static_cast<std::int64_t>(stride);
    const auto off = static_cast<std::int64_t>(kx) - static_cast<std::int64_t>(pad);
    std::int64_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
    std::int64_t hi = (static_cast<std::int64_t>(w) - 1 - off) / s + 1;
    if (static_cast<std::int64_t>(w) - 1 - off < 0) hi = 0;
    hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(ow));
    if (hi < lo) hi = lo;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }

  // Input row for output row y and kernel row ky, or -1 when it falls in padding.
  std::int64_t in_row(std::size_t y, std::size_t ky) const {
    auto r = static_cast<std::int64_t>(y * stride + ky) - static_cast<std::int64_t>(pad);
    return (r < 0 || r >= static_cast<std::int64_t>(h)) ? -1 : r;
  }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                           std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d", input.shape(), kernel.shape());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.c) throw ShapeError("conv2d: channel mismatch", input.shape(), kernel.shape());
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: kernel larger than padded input", input.shape(), kernel.shape());
  }
  if (bias.numel() != g.o) throw ShapeError("conv2d: bias", kernel.shape(), bias.shape());
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

}  // namespace

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::size_t kLaneWidth = 4;  // doubles per vector lane
constexpr std::size_t kPanel = 8;      // output columns per micro-tile
constexpr std::size_t kRows = 4;       // output channels per micro-tile
constexpr std::size_t kWide = 32;      // columns per single-row tile

// Columns are (n, y, x) flattened and padded to a multiple of kWide; rows are
// (ic, ky, kx) flattened. Padding taps hold 0.
RowMat im2col(const double* in, const ConvGeometry& g, std::size_t cols_padded) {
  const std::size_t k_total = g.c * g.kh * g.kw;
  const std::size_t out_plane = g.oh * g.ow;
  RowMat col = RowMat::Zero(static_cast<Eigen::Index>(k_total), static_cast<Eigen::Index>(cols_padded));
  for (std::size_t ic = 0; ic < g.c; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t k = (ic * g.kh + ky) * g.kw + kx;
        double* row = col.data() + k * cols_padded;
        const auto [lo, hi] = g.col_range(kx);
        const std::size_t shift = kx - g.pad;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* src = in + (n * g.c + ic) * g.h * g.w;
          for (std::size_t y = 0; y < g.oh; ++y) {
            const std::int64_t r = g.in_row(y, ky);
            if (r < 0) continue;
            const double* srow = src + static_cast<std::size_t>(r) * g.w;
            double* drow = row + n * out_plane + y * g.ow;
            for (std::size_t x = lo; x < hi; ++x) drow[x] = srow[x * g.stride + shift];
          }
        }
      }
  return col;
}

// Adds one sample's column gradient (k_total × plane) back into its input.
void col2im_add(const RowMat& dcol, const ConvGeometry& g, std::size_t n, double* din) {
  const std::size_t plane = g.oh * g.ow;
  double* dst = din + n * g.c * g.h * g.w;
  for (std::size_t ic = 0; ic < g.c; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t k = (ic * g.kh + ky) * g.kw + kx;
        const double* row = dcol.data() + k * plane;
        const auto [lo, hi] = g.col_range(kx);
        const std::size_t shift = kx - g.pad;
        double* dplane = dst + ic * g.h * g.w;
        for (std::size_t y = 0; y < g.oh; ++y) {
          const std::int64_t r = g.in_row(y, ky);
          if (r < 0) continue;
          double* drow = dplane + static_cast<std::size_t>(r) * g.w;
          const double* srow = row + y * g.ow;
          for (std::size_t x = lo; x < hi; ++x) drow[x * g.stride + shift] += srow[x];
        }
      }
}

using Lane = double __attribute__((vector_size(kLaneWidth * sizeof(double))));

inline Lane load_lane(const double* p) {
  Lane v;
  std::memcpy(&v, p, sizeof(Lane));
  return v;
}

// acc[r][j] = bias[r] + sum_k w[r][k] * col[k][j], k ascending. Lanes run
// across j only, so every element sees the same add sequence as a scalar loop.
template <std::size_t R, std::size_t L>
void micro_tile(const double* w, std::size_t k_total, const double* col, std::size_t ld,
                const double* bias, double (&out)[R][L * kLaneWidth]) {
  Lane acc[R][L];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t e = 0; e < kLaneWidth; ++e) acc[r][l][e] = bias[r];
  for (std::size_t k = 0; k < k_total; ++k) {
    const double* c = col + k * ld;
    Lane cv[L];
    for (std::size_t l = 0; l < L; ++l) cv[l] = load_lane(c + kLaneWidth * l);
    for (std::size_t r = 0; r < R; ++r) {
      const double wv = w[r * k_total + k];
      for (std::size_t l = 0; l < L; ++l) acc[r][l] += wv * cv[l];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t l = 0; l < L; ++l) std::memcpy(&out[r][kLaneWidth * l], &acc[r][l], sizeof(Lane));
}

// Writes `count` consecutive columns starting at flat column j0 of output
// channel oc into NCHW storage.
inline void scatter(double* out, const ConvGeometry& g, std::size_t oc, std::size_t j0, std::size_t count,
                    const double* vals) {
  const std::size_t out_plane = g.oh * g.ow;
  std::size_t n = j0 / out_plane, p = j0 % out_plane;
  for (std::size_t j = 0; j < count; ++j) {
    out[(n * g.o + oc) * out_plane + p] = vals[j];
    if (++p == out_plane) {
      p = 0;
      ++n;
    }
  }
}

// Zero-padded copy of the input, planes of (h + 2p) × (w + 2p), with slack at
// the end so full-width vector loads past the last row stay in bounds.
std::vector<double> pad_input(const double* in, const ConvGeometry& g) {
  const std::size_t hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  std::vector<double> out(g.n * g.c * hp * wp + kWide, 0.0);
  for (std::size_t p = 0; p < g.n * g.c; ++p)
    for (std::size_t y = 0; y < g.h; ++y)
      std::copy_n(in + (p * g.h + y) * g.w, g.w, out.data() + (p * hp + y + g.pad) * wp + g.pad);
  return out;
}

// Stride-1 direct convolution over one output row segment: R channels ×
// L lanes of columns starting at x0. Same accumulation order as micro_tile.
template <std::size_t R, std::size_t L>
void direct_tile(const double* w, const ConvGeometry& g, const double* padded, std::size_t n, std::size_t y,
                 std::size_t x0, const double* bias, double (&out)[R][L * kLaneWidth]) {
  const std::size_t hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
  const std::size_t k_total = g.c * g.kh * g.kw;
  Lane acc[R][L];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t e = 0; e < kLaneWidth; ++e) acc[r][l][e] = bias[r];
  std::size_t k = 0;
  for (std::size_t ic = 0; ic < g.c; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const double* row = padded + ((n * g.c + ic) * hp + y + ky) * wp + x0;
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++k) {
        Lane cv[L];
        for (std::size_t l = 0; l < L; ++l) cv[l] = load_lane(row + kx + kLaneWidth * l);
        for (std::size_t r = 0; r < R; ++r) {
          const double wv = w[r * k_total + k];
          for (std::size_t l = 0; l < L; ++l) acc[r][l] += wv * cv[l];
        }
      }
    }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t l = 0; l < L; ++l) std::memcpy(&out[r][kLaneWidth * l], &acc[r][l], sizeof(Lane));
}

// Direct path for stride-1 convolutions with rows wide enough to fill lanes.
bool use_direct(const ConvGeometry& g) { return g.stride == 1 && g.ow >= 16; }
// Input gradient as a direct convolution needs a square kernel and pad < k.
bool transposable(const ConvGeometry& g) { return use_direct(g) && g.kh == g.kw && g.pad < g.kh && g.w >= 16; }

void conv_direct(const double* in, const double* wt, const double* bs, const ConvGeometry& g, double* out) {
  const auto padded = pad_input(in, g);
  const std::size_t k_total = g.c * g.kh * g.kw;
  const std::size_t full_rows = g.o / kRows * kRows;
  const std::size_t plane = g.oh * g.ow;
  auto store = [&](std::size_t n, std::size_t oc, std::size_t y, std::size_t x0, std::size_t count, const double* v) {
    std::copy_n(v, count, out + (n * g.o + oc) * plane + y * g.ow + x0);
  };
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t y = 0; y < g.oh; ++y) {
      for (std::size_t x0 = 0; x0 < g.ow; x0 += kPanel) {
        const std::size_t count = std::min(kPanel, g.ow - x0);
        for (std::size_t oc = 0; oc < full_rows; oc += kRows) {
          double acc[kRows][kPanel];
          direct_tile<kRows, kPanel / kLaneWidth>(wt + oc * k_total, g, padded.data(), n, y, x0, bs + oc, acc);
          for (std::size_t r = 0; r < kRows; ++r) store(n, oc + r, y, x0, count, acc[r]);
        }
      }
      for (std::size_t oc = full_rows; oc < g.o; ++oc)
        for (std::size_t x0 = 0; x0 < g.ow; x0 += kWide) {
          double acc[1][kWide];
          direct_tile<1, kWide / kLaneWidth>(wt + oc * k_total, g, padded.data(), n, y, x0, bs + oc, acc);
          store(n, oc, y, x0, std::min(kWide, g.ow - x0), acc[0]);
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernel, bias, stride, padding);
  const std::size_t out_plane = g.oh * g.ow;
  const std::size_t cols = g.n * out_plane;
  const std::size_t cols_padded = (cols + kWide - 1) / kWide * kWide;
  const std::size_t k_total = g.c * g.kh * g.kw;
  std::vector<double> out(g.n * g.o * out_plane);
  const double* wt = kernel.data().data();
  const double* bs = bias.data().data();
  std::shared_ptr<RowMat> col;
  if (use_direct(g)) {
    conv_direct(input.data().data(), wt, bs, g, out.data());
  } else {
    col = std::make_shared<RowMat>(im2col(input.data().data(), g, cols_padded));
    const std::size_t full_rows = g.o / kRows * kRows;
    for (std::size_t j0 = 0; j0 < cols; j0 += kPanel) {
      const double* cp = col->data() + j0;
      const std::size_t count = std::min(kPanel, cols - j0);
      for (std::size_t oc = 0; oc < full_rows; oc += kRows) {
        double acc[kRows][kPanel];
        micro_tile<kRows, kPanel / kLaneWidth>(wt + oc * k_total, k_total, cp, cols_padded, bs + oc, acc);
        for (std::size_t r = 0; r < kRows; ++r) scatter(out.data(), g, oc + r, j0, count, acc[r]);
      }
    }
    // Leftover channels: one row at a time over wider panels to keep enough
    // independent accumulators in flight.
    for (std::size_t oc = full_rows; oc < g.o; ++oc) {
      for (std::size_t j0 = 0; j0 < cols; j0 += kWide) {
        double acc[1][kWide];
        micro_tile<1, kWide / kLaneWidth>(wt + oc * k_total, k_total, col->data() + j0, cols_padded, bs + oc, acc);
        scatter(out.data(), g, oc, j0, std::min(kWide, cols - j0), acc[0]);
      }
    }
  }
  if (!kernel.requires_grad()) col.reset();

  auto ii = input.impl(), ki = kernel.impl(), bi = bias.impl();
  return record_op({g.n, g.o, g.oh, g.ow}, std::move(out), {input, kernel, bias},
                   [ii, ki, bi, g, col, out_plane, k_total](const std::vector<double>& grad) {
    const auto o = static_cast<Eigen::Index>(g.o), kt = static_cast<Eigen::Index>(k_total);
    const auto plane = static_cast<Eigen::Index>(out_plane);
    if (bi->requires_grad) {
      auto& db = grad_buffer(*bi);
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t oc = 0; oc < g.o; ++oc) {
          const double* gp = grad.data() + (n * g.o + oc) * out_plane;
          db[oc] += std::accumulate(gp, gp + out_plane, 0.0);
        }
    }
    if (ki->requires_grad) {
      auto& dk = grad_buffer(*ki);
      Eigen::Map<RowMat> dkm(dk.data(), o, kt);
      ConvGeometry one = g;
      one.n = 1;
      RowMat sample_col;
      for (std::size_t n = 0; n < g.n; ++n) {
        // The gradient slice of one sample is already O × plane, row-major.
        Eigen::Map<const RowMat> gn(grad.data() + n * g.o * out_plane, o, plane);
        if (col) {
          dkm.noalias() += gn * col->middleCols(static_cast<Eigen::Index>(n * out_plane), plane).transpose();
        } else {
          sample_col = im2col(ii->data.data() + n * g.c * g.h * g.w, one, out_plane);
          dkm.noalias() += gn * sample_col.transpose();
        }
      }
    }
    if (ii->requires_grad) {
      auto& dx = grad_buffer(*ii);
      if (transposable(g)) {
        // Stride-1 input gradient: full correlation of the output gradient
        // with the spatially flipped, channel-transposed kernel.
        ConvGeometry t{g.n, g.o, g.oh, g.ow, g.c, g.kh, g.kw, g.h, g.w, 1, g.kh - 1 - g.pad};
        std::vector<double> flipped(ki->data.size());
        for (std::size_t oc = 0; oc < g.o; ++oc)
          for (std::size_t ic = 0; ic < g.c; ++ic)
            for (std::size_t ky = 0; ky < g.kh; ++ky)
              for (std::size_t kx = 0; kx < g.kw; ++kx)
                flipped[((ic * g.o + oc) * g.kh + ky) * g.kw + kx] =
                    ki->data[((oc * g.c + ic) * g.kh + (g.kh - 1 - ky)) * g.kw + (g.kw - 1 - kx)];
        const std::vector<double> zero(g.c, 0.0);
        std::vector<double> tmp(dx.size());
        conv_direct(grad.data(), flipped.data(), zero.data(), t, tmp.data());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += tmp[i];
      } else {
        Eigen::Map<const RowMat> wm(ki->data.data(), o, kt);
        RowMat dcol;
        for (std::size_t n = 0; n < g.n; ++n) {
          Eigen::Map<const RowMat> gn(grad.data() + n * g.o * out_plane, o, plane);
          dcol.noalias() = wm.transpose() * gn;
          col2im_add(dcol, g, n, dx.data());
        }
      }
    }
  });
}

Tensor resample(const Tensor& input, Resample mode) {
  if (input.rank() != 4) {
    throw std::invalid_argument("resample: expected NCHW, got " + shape_str(input.shape()));
  }
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  auto ii = input.impl();
  if (mode == Resample::Down2) {
    if (h % 2 || w % 2) {
      throw std::invalid_argument("resample down2: odd spatial dims " + shape_str(input.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<double> out(planes * oh * ow);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = input.data().data() + p * h * w;
      double* dst = out.data() + p * oh * ow;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const double* a = src + 2 * y * w + 2 * x;
          dst[y * ow + x] = 0.25 * ((a[0] + a[1]) + (a[w] + a[w + 1]));
        }
    }
    return record_op({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                     [ii, planes, h, w, oh, ow](const std::vector<double>& g) {
      auto& dx = grad_buffer(*ii);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x) {
            const double v = 0.25 * g[(p * oh + y) * ow + x];
            double* a = dx.data() + p * h * w + 2 * y * w + 2 * x;
            a[0] += v;
            a[1] += v;
            a[w] += v;
            a[w + 1] += v;
          }
    });
  }
  const std::size_t oh = h * 2, ow = w * 2;
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = input.data().data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / 2) * w + x / 2];
  }
  return record_op({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                   [ii, planes, h, w, oh, ow](const std::vector<double>& g) {
    auto& dx = grad_buffer(*ii);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) dx[p * h * w + (y / 2) * w + x / 2] += g[(p * oh + y) * ow + x];
  });
}

}  // namespace litediff
