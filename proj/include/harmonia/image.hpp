#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace harmonia {

/// Dense H x W x C image, row-major with interleaved channels, unit
/// intensity range. Public operations clamp their outputs to [0, 1].
template <typename Scalar>
class Image {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Image() = default;
  Image(int height, int width, int channels, Scalar fill = Scalar(0))
      : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 1) {
      throw std::invalid_argument("Image: invalid dimensions");
    }
    data_ = Storage::Constant(Eigen::Index(height) * width * channels, fill);
  }

  static Image from_data(int height, int width, int channels, Storage data) {
    Image img(height, width, channels);
    if (data.size() != img.data_.size()) {
      throw std::invalid_argument("Image: data length " + std::to_string(data.size()) +
                                  " does not match " + std::to_string(img.data_.size()));
    }
    img.data_ = std::move(data);
    return img;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  Eigen::Index pixels() const { return Eigen::Index(height_) * width_; }
  bool empty() const { return data_.size() == 0; }

  Scalar& operator()(int y, int x, int c) { return data_[index(y, x, c)]; }
  Scalar operator()(int y, int x, int c) const { return data_[index(y, x, c)]; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  template <typename T>
  Image<T> cast() const {
    return Image<T>::from_data(height_, width_, channels_, data_.template cast<T>());
  }

  void clamp_unit() { data_ = data_.max(Scalar(0)).min(Scalar(1)); }

  bool operator==(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_ && (data_ == other.data_).all();
  }

 private:
  Eigen::Index index(int y, int x, int c) const {
    return (Eigen::Index(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  Storage data_;
};

/// H x W alpha mask in [0, 1]. Soft values are kept as-is everywhere.
template <typename Scalar>
class Mask {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Mask() = default;
  Mask(int height, int width, Scalar fill = Scalar(0)) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw std::invalid_argument("Mask: invalid dimensions");
    data_ = Storage::Constant(Eigen::Index(height) * width, fill);
  }

  static Mask from_data(int height, int width, Storage data) {
    Mask m(height, width);
    if (data.size() != m.data_.size()) {
      throw std::invalid_argument("Mask: data length does not match dimensions");
    }
    m.data_ = std::move(data);
    return m;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  Eigen::Index pixels() const { return Eigen::Index(height_) * width_; }

  Scalar& operator()(int y, int x) { return data_[Eigen::Index(y) * width_ + x]; }
  Scalar operator()(int y, int x) const { return data_[Eigen::Index(y) * width_ + x]; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  template <typename T>
  Mask<T> cast() const {
    return Mask<T>::from_data(height_, width_, data_.template cast<T>());
  }

  Mask inverted() const { return from_data(height_, width_, Scalar(1) - data_); }

  bool operator==(const Mask& other) const {
    return height_ == other.height_ && width_ == other.width_ && (data_ == other.data_).all();
  }

 private:
  int height_ = 0;
  int width_ = 0;
  Storage data_;
};

using ImageTensor = Image<float>;
using MaskTensor = Mask<float>;

namespace detail {

template <typename A, typename B>
void require_same_size(const A& a, const B& b, const char* op, const char* what) {
  std::string axes;
  if (a.height() != b.height()) axes += "height";
  if (a.width() != b.width()) axes += axes.empty() ? "width" : "/width";
  if (!axes.empty()) {
    throw std::invalid_argument(std::string(op) + ": " + what + " " + axes + " mismatch (" +
                                std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                                " vs " + std::to_string(b.height()) + "x" +
                                std::to_string(b.width()) + ")");
  }
}

/// One output sample along an axis: neighbours i0/i1 and the weight of i1.
struct AxisTap {
  int i0;
  int i1;
  double frac;
};

/// Half-pixel-centred sampling positions (align-corners off), edge clamped.
inline std::vector<AxisTap> bilinear_axis(int in_size, int out_size) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(out_size));
  const double scale = double(in_size) / double(out_size);
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(in_size - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_size - 1);
    taps[std::size_t(o)] = {i0, i1, src - i0};
  }
  return taps;
}

/// Nested-lerp bilinear blend; exact for constant neighbourhoods.
template <typename Scalar>
inline Scalar bilerp(Scalar a, Scalar b, Scalar c, Scalar d, Scalar fx, Scalar fy) {
  return std::lerp(std::lerp(a, b, fx), std::lerp(c, d, fx), fy);
}

template <typename Scalar>
void resize_plane(const Scalar* in, int in_h, int in_w, int channels, Scalar* out, int out_h,
                  int out_w) {
  const auto ty = bilinear_axis(in_h, out_h);
  const auto tx = bilinear_axis(in_w, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto& ay = ty[std::size_t(y)];
    const Scalar* r0 = in + std::ptrdiff_t(ay.i0) * in_w * channels;
    const Scalar* r1 = in + std::ptrdiff_t(ay.i1) * in_w * channels;
    Scalar* dst = out + std::ptrdiff_t(y) * out_w * channels;
    for (int x = 0; x < out_w; ++x) {
      const auto& ax = tx[std::size_t(x)];
      for (int c = 0; c < channels; ++c) {
        dst[x * channels + c] = bilerp(r0[ax.i0 * channels + c], r0[ax.i1 * channels + c],
                                       r1[ax.i0 * channels + c], r1[ax.i1 * channels + c],
                                       Scalar(ax.frac), Scalar(ay.frac));
      }
    }
  }
}

/// Running max over [x - w, x + w] along a row (van Herk / Gil-Werman).
/// Values are non-negative, so zero padding never wins.
template <typename Scalar>
void sliding_max_row(const Scalar* in, Scalar* out, int n, int w) {
  if (w == 0) {
    std::copy(in, in + n, out);
    return;
  }
  const int k = 2 * w + 1;
  const int padded = n + 2 * w;
  const int blocks = (padded + k - 1) / k;
  std::vector<Scalar> src(std::size_t(blocks) * k, Scalar(0));
  std::copy(in, in + n, src.begin() + w);
  std::vector<Scalar> prefix(src.size()), suffix(src.size());
  for (int b = 0; b < blocks; ++b) {
    const int lo = b * k;
    prefix[lo] = src[lo];
    for (int i = 1; i < k; ++i) prefix[lo + i] = std::max(prefix[lo + i - 1], src[lo + i]);
    suffix[lo + k - 1] = src[lo + k - 1];
    for (int i = k - 2; i >= 0; --i) suffix[lo + i] = std::max(suffix[lo + i + 1], src[lo + i]);
  }
  for (int x = 0; x < n; ++x) out[x] = std::max(suffix[x], prefix[x + k - 1]);
}

}  // namespace detail

/// C = M * F + (1 - M) * B, per pixel and channel.
template <typename Scalar>
Image<Scalar> composite(const Image<Scalar>& fg, const Image<Scalar>& bg, const Mask<Scalar>& mask) {
  detail::require_same_size(fg, bg, "composite", "background");
  detail::require_same_size(fg, mask, "composite", "mask");
  if (fg.channels() != bg.channels()) {
    throw std::invalid_argument("composite: background channels mismatch");
  }
  Image<Scalar> out(fg.height(), fg.width(), fg.channels());
  const int c = fg.channels();
  for (Eigen::Index p = 0; p < fg.pixels(); ++p) {
    const Scalar m = mask.data()[p];
    for (int k = 0; k < c; ++k) {
      const Eigen::Index i = p * c + k;
      // lerp is exact at m = 0, m = 1 and when fg == bg.
      out.data()[i] = std::lerp(bg.data()[i], fg.data()[i], m);
    }
  }
  out.clamp_unit();
  return out;
}

template <typename Scalar>
Image<Scalar> resize_bilinear(const Image<Scalar>& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: zero target dimension");
  if (img.height() < 1 || img.width() < 1) throw std::invalid_argument("resize_bilinear: empty image");
  if (out_h == img.height() && out_w == img.width()) return img;
  Image<Scalar> out(out_h, out_w, img.channels());
  detail::resize_plane(img.data().data(), img.height(), img.width(), img.channels(),
                       out.data().data(), out_h, out_w);
  out.clamp_unit();
  return out;
}

template <typename Scalar>
Mask<Scalar> resize_bilinear(const Mask<Scalar>& mask, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: zero target dimension");
  if (mask.height() < 1 || mask.width() < 1) throw std::invalid_argument("resize_bilinear: empty mask");
  if (out_h == mask.height() && out_w == mask.width()) return mask;
  Mask<Scalar> out(out_h, out_w);
  detail::resize_plane(mask.data().data(), mask.height(), mask.width(), 1, out.data().data(),
                       out_h, out_w);
  return out;
}

/// Grayscale max-dilation with a Euclidean disc of the given radius.
template <typename Scalar>
Mask<Scalar> dilate_mask(const Mask<Scalar>& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("dilate_mask: negative radius");
  if (radius == 0) return mask;
  const int h = mask.height();
  const int w = mask.width();
  // Half-width of the disc at vertical offset dy: largest hw with hw^2 + dy^2 <= r^2.
  std::vector<int> half(std::size_t(radius) + 1);
  for (int dy = 0; dy <= radius; ++dy) {
    int hw = 0;
    while ((hw + 1) * (hw + 1) + dy * dy <= radius * radius) ++hw;
    half[std::size_t(dy)] = hw;
  }
  // One horizontally max-filtered copy per distinct half-width.
  std::vector<int> slot(std::size_t(radius) + 1, -1);
  std::vector<std::vector<Scalar>> rowmax;
  for (int dy = 0; dy <= radius; ++dy) {
    const int hw = half[std::size_t(dy)];
    if (slot[std::size_t(hw)] >= 0) continue;
    slot[std::size_t(hw)] = static_cast<int>(rowmax.size());
    std::vector<Scalar> filtered(std::size_t(h) * w);
    for (int y = 0; y < h; ++y) {
      detail::sliding_max_row(mask.data().data() + std::ptrdiff_t(y) * w,
                              filtered.data() + std::ptrdiff_t(y) * w, w, hw);
    }
    rowmax.push_back(std::move(filtered));
  }
  Mask<Scalar> out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int dy = -radius; dy <= radius; ++dy) {
      const int sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      const auto& src = rowmax[std::size_t(slot[std::size_t(half[std::size_t(std::abs(dy))])])];
      for (int x = 0; x < w; ++x) {
        out(y, x) = std::max(out(y, x), src[std::size_t(sy) * w + x]);
      }
    }
  }
  return out;
}

/// Scales pixels under the mask by `factor`, clamped to [0, 1]; soft mask
/// values blend between the original and scaled pixel.
template <typename Scalar>
Image<Scalar> adjust_brightness(const Image<Scalar>& img, const Mask<Scalar>& mask, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) {
    throw std::invalid_argument("adjust_brightness: factor must be positive");
  }
  detail::require_same_size(img, mask, "adjust_brightness", "mask");
  Image<Scalar> out = img;
  const int c = img.channels();
  for (Eigen::Index p = 0; p < img.pixels(); ++p) {
    const Scalar m = mask.data()[p];
    if (m == Scalar(0)) continue;
    for (int k = 0; k < c; ++k) {
      const Scalar v = img.data()[p * c + k];
      const Scalar scaled = static_cast<Scalar>(std::clamp(double(v) * factor, 0.0, 1.0));
      out.data()[p * c + k] = std::lerp(v, scaled, m);
    }
  }
  return out;
}

/// Image restricted to one channel-broadcast mask: img * mask.
template <typename Scalar>
Image<Scalar> masked(const Image<Scalar>& img, const Mask<Scalar>& mask) {
  detail::require_same_size(img, mask, "masked", "mask");
  Image<Scalar> out = img;
  const int c = img.channels();
  for (Eigen::Index p = 0; p < img.pixels(); ++p) {
    for (int k = 0; k < c; ++k) out.data()[p * c + k] *= mask.data()[p];
  }
  return out;
}

/// Luma Y = 0.299 R + 0.587 G + 0.114 B; single-channel images pass through.
template <typename Scalar>
Image<Scalar> to_luma(const Image<Scalar>& img) {
  if (img.channels() == 1) return img;
  if (img.channels() != 3) throw std::invalid_argument("to_luma: expected 1 or 3 channels");
  Image<Scalar> out(img.height(), img.width(), 1);
  for (Eigen::Index p = 0; p < img.pixels(); ++p) {
    out.data()[p] = Scalar(0.299) * img.data()[3 * p] + Scalar(0.587) * img.data()[3 * p + 1] +
                    Scalar(0.114) * img.data()[3 * p + 2];
  }
  return out;
}

}  // namespace harmonia
