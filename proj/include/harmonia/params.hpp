#pragma once

#include <harmonia/image.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace harmonia {

inline constexpr int kCurveChannels = 3;
inline constexpr int kDefaultCurveNodes = 32;
inline constexpr int kDefaultShadingGrid = 64;
inline constexpr double kShadingGainMax = 2.0;

/// Three piecewise-linear tone curves (R, G, B). Row c holds channel c's node
/// coordinates; x is strictly increasing from 0 to 1, y lies in [0, 1].
struct CurveParams {
  using Nodes = Eigen::Matrix<double, kCurveChannels, Eigen::Dynamic, Eigen::RowMajor>;
  Nodes x;
  Nodes y;

  int nodes() const { return int(x.cols()); }

  static CurveParams identity(int nodes = kDefaultCurveNodes) {
    CurveParams c;
    c.x.resize(kCurveChannels, nodes);
    for (int k = 0; k < nodes; ++k) c.x.col(k).setConstant(double(k) / double(nodes - 1));
    c.y = c.x;
    return c;
  }

  /// Throws std::invalid_argument naming the first offending node.
  void validate() const {
    if (x.cols() < 2 || y.cols() != x.cols()) throw std::invalid_argument("curves: need >= 2 nodes per channel");
    for (int c = 0; c < kCurveChannels; ++c) {
      const std::string at = "curves/" + std::to_string(c);
      if (x(c, 0) != 0.0) throw std::invalid_argument(at + "/0/0: first x must be 0");
      if (x(c, x.cols() - 1) != 1.0) throw std::invalid_argument(at + "/" + std::to_string(x.cols() - 1) + "/0: last x must be 1");
      for (Eigen::Index k = 0; k < x.cols(); ++k) {
        if (!std::isfinite(x(c, k)) || !std::isfinite(y(c, k))) throw std::invalid_argument(at + "/" + std::to_string(k) + ": non-finite node");
        if (k > 0 && !(x(c, k) > x(c, k - 1))) throw std::invalid_argument(at + "/" + std::to_string(k) + "/0: x not strictly increasing");
        if (y(c, k) < 0.0 || y(c, k) > 1.0) throw std::invalid_argument(at + "/" + std::to_string(k) + "/1: y outside [0,1]");
      }
    }
  }

  bool operator==(const CurveParams& o) const { return x == o.x && y == o.y; }
};

/// Low-resolution multiplicative gain grid, values in (0, kShadingGainMax].
struct ShadingMap {
  using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Grid grid;

  static ShadingMap identity(int size = kDefaultShadingGrid) {
    return ShadingMap{Grid::Ones(size, size)};
  }

  void validate() const {
    if (grid.rows() < 1 || grid.cols() < 1) throw std::invalid_argument("shading: empty grid");
    for (Eigen::Index r = 0; r < grid.rows(); ++r) {
      for (Eigen::Index c = 0; c < grid.cols(); ++c) {
        const double v = grid(r, c);
        if (!(v > 0.0) || v > kShadingGainMax || !std::isfinite(v)) {
          throw std::invalid_argument("shading/" + std::to_string(r) + "/" + std::to_string(c) +
                                      ": gain outside (0, 2]");
        }
      }
    }
  }

  bool operator==(const ShadingMap& o) const { return grid == o.grid; }
};

struct HarmonizationParams {
  CurveParams curves;
  ShadingMap shading;

  void validate() const {
    curves.validate();
    shading.validate();
  }
  bool operator==(const HarmonizationParams& o) const = default;
};

inline HarmonizationParams identity_params(int nodes = kDefaultCurveNodes,
                                           int grid = kDefaultShadingGrid) {
  return {CurveParams::identity(nodes), ShadingMap::identity(grid)};
}

namespace detail {

/// Index k of the segment [x_k, x_{k+1}) holding v; knots belong to the
/// segment on their right, v = 1 to the last segment.
template <typename Row>
inline int curve_segment(const Row& xs, double v) {
  const int n = int(xs.size());
  int lo = 0;
  int hi = n - 1;
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (xs[mid] <= v) lo = mid; else hi = mid;
  }
  return lo;
}

}  // namespace detail

/// Evaluates channel `c` of the curve at v in [0, 1]. Segments lying on the
/// identity line return v unchanged.
inline double evaluate_curve(const CurveParams& curves, int c, double v) {
  v = std::clamp(v, 0.0, 1.0);
  const auto xs = curves.x.row(c);
  const auto ys = curves.y.row(c);
  const int k = detail::curve_segment(xs, v);
  const double x0 = xs[k], x1 = xs[k + 1], y0 = ys[k], y1 = ys[k + 1];
  if (y0 == x0 && y1 == x1) return v;
  const double t = (v - x0) / (x1 - x0);
  return std::clamp(std::lerp(y0, y1, t), 0.0, 1.0);
}

/// t1: per-channel curve lookup, gated by the mask.
template <typename Scalar>
Image<Scalar> apply_curves(const Image<Scalar>& img, const Mask<Scalar>& mask,
                           const CurveParams& curves) {
  if (img.channels() != kCurveChannels) throw std::invalid_argument("apply_curves: expected 3-channel image");
  detail::require_same_size(img, mask, "apply_curves", "mask");
  curves.validate();
  Image<Scalar> out(img.height(), img.width(), img.channels());
  for (Eigen::Index p = 0; p < img.pixels(); ++p) {
    const Scalar m = mask.data()[p];
    for (int c = 0; c < kCurveChannels; ++c) {
      const Scalar v = img.data()[p * 3 + c];
      if (m == Scalar(0)) {
        out.data()[p * 3 + c] = v;
        continue;
      }
      const Scalar mapped = static_cast<Scalar>(evaluate_curve(curves, c, double(v)));
      out.data()[p * 3 + c] = std::lerp(v, mapped, m);
    }
  }
  out.clamp_unit();
  return out;
}

/// t2: multiplies by the bilinearly upsampled shading grid, clamps the
/// product to [0, 1], gated by the mask.
template <typename Scalar>
Image<Scalar> apply_shading(const Image<Scalar>& img, const Mask<Scalar>& mask,
                            const ShadingMap& shading) {
  detail::require_same_size(img, mask, "apply_shading", "mask");
  shading.validate();
  const int h = img.height();
  const int w = img.width();
  const int ch = img.channels();
  const auto ty = detail::bilinear_axis(int(shading.grid.rows()), h);
  const auto tx = detail::bilinear_axis(int(shading.grid.cols()), w);
  Image<Scalar> out = img;
  for (int y = 0; y < h; ++y) {
    const auto& ay = ty[std::size_t(y)];
    for (int x = 0; x < w; ++x) {
      const Eigen::Index p = Eigen::Index(y) * w + x;
      const Scalar m = mask.data()[p];
      if (m == Scalar(0)) continue;
      const auto& ax = tx[std::size_t(x)];
      const double gain = detail::bilerp(shading.grid(ay.i0, ax.i0), shading.grid(ay.i0, ax.i1),
                                         shading.grid(ay.i1, ax.i0), shading.grid(ay.i1, ax.i1),
                                         ax.frac, ay.frac);
      for (int c = 0; c < ch; ++c) {
        const Scalar v = img.data()[p * ch + c];
        const Scalar shaded = static_cast<Scalar>(std::clamp(double(v) * gain, 0.0, 1.0));
        out.data()[p * ch + c] = std::lerp(v, shaded, m);
      }
    }
  }
  out.clamp_unit();
  return out;
}

/// O = t2(t1(C, M; curves), M; shading).
template <typename Scalar>
Image<Scalar> harmonize_full(const Image<Scalar>& composite, const Mask<Scalar>& mask,
                             const HarmonizationParams& params) {
  return apply_shading(apply_curves(composite, mask, params.curves), mask, params.shading);
}

}  // namespace harmonia
