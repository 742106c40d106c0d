#pragma once

// Synthetic data and scratch-space helpers shared by the test binaries.

#include <harmonia/data_streams.hpp>
#include <harmonia/image_io.hpp>
#include <harmonia/image.hpp>
#include <harmonia/params.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace harmonia::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::path(HARMONIA_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline ImageTensor random_image(std::mt19937_64& rng, int h, int w, int channels = 3) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageTensor img(h, w, channels);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

/// Values on the 8-bit lattice, so PNG round trips are exact.
inline ImageTensor random_image_8bit(std::mt19937_64& rng, int h, int w) {
  std::uniform_int_distribution<int> u(0, 255);
  ImageTensor img(h, w, 3);
  for (auto& v : img.data()) v = float(u(rng)) / 255.0f;
  return img;
}

/// Low-frequency colour field: a few random gradients and blobs per channel.
inline ImageTensor smooth_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageTensor img(h, w, 3);
  for (int c = 0; c < 3; ++c) {
    const double base = 0.25 + 0.5 * u(rng), gx = u(rng) - 0.5, gy = u(rng) - 0.5;
    const double bx = u(rng), by = u(rng), amp = 0.4 * (u(rng) - 0.5), rad = 0.15 + 0.2 * u(rng);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double fx = (x + 0.5) / w, fy = (y + 0.5) / h;
        const double d2 = (fx - bx) * (fx - bx) + (fy - by) * (fy - by);
        const double v = base + 0.4 * (gx * (fx - 0.5) + gy * (fy - 0.5)) + amp * std::exp(-d2 / (rad * rad));
        img(y, x, c) = float(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

/// Soft-edged ellipse covering roughly a quarter of the frame.
inline MaskTensor ellipse_mask(std::mt19937_64& rng, int h, int w, bool soft = true) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cx = 0.35 + 0.3 * u(rng), cy = 0.35 + 0.3 * u(rng);
  const double rx = 0.18 + 0.12 * u(rng), ry = 0.18 + 0.12 * u(rng);
  MaskTensor m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = ((x + 0.5) / w - cx) / rx, dy = ((y + 0.5) / h - cy) / ry;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double v = soft ? std::clamp((1.0 - r) * 8.0, 0.0, 1.0) : (r <= 1.0 ? 1.0 : 0.0);
      m(y, x) = float(v);
    }
  }
  return m;
}

inline MaskTensor random_mask(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  MaskTensor m(h, w);
  for (auto& v : m.data()) v = u(rng);
  return m;
}

/// Binary mask with random 0/1 pixels.
inline MaskTensor binary_mask(std::mt19937_64& rng, int h, int w) {
  std::bernoulli_distribution b(0.5);
  MaskTensor m(h, w);
  for (auto& v : m.data()) v = b(rng) ? 1.0f : 0.0f;
  return m;
}

/// Random valid params: sorted interior knots, arbitrary y, gains in (0, 2].
inline HarmonizationParams random_params(std::mt19937_64& rng, int nodes = kDefaultCurveNodes,
                                         int grid = kDefaultShadingGrid) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  HarmonizationParams p = identity_params(nodes, grid);
  for (int c = 0; c < kCurveChannels; ++c) {
    std::vector<double> inc(std::size_t(nodes - 1));
    double total = 0.0;
    for (auto& v : inc) total += v = 0.05 + u(rng);
    double acc = 0.0;
    for (int k = 1; k < nodes - 1; ++k) {
      acc += inc[std::size_t(k - 1)];
      p.curves.x(c, k) = acc / total;
    }
    for (int k = 0; k < nodes; ++k) p.curves.y(c, k) = u(rng);
  }
  for (auto& g : p.shading.grid.reshaped()) g = 0.05 + 1.95 * u(rng);
  return p;
}

/// Artist-style retouch: per-channel gain and gamma.
inline ImageTensor retouch(const ImageTensor& img, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double gain[3], gamma[3];
  for (int c = 0; c < 3; ++c) {
    gain[c] = 0.75 + 0.5 * u(rng);
    gamma[c] = 0.7 + 0.6 * u(rng);
  }
  ImageTensor out = img;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        out(y, x, c) = float(std::clamp(gain[c] * std::pow(double(img(y, x, c)), gamma[c]), 0.0, 1.0));
      }
    }
  }
  return out;
}

inline RetouchTriplet synthetic_triplet(std::mt19937_64& rng, int size) {
  RetouchTriplet t;
  t.original = smooth_image(rng, size, size);
  t.retouched = retouch(t.original, rng);
  t.mask = ellipse_mask(rng, size, size);
  return t;
}

struct DatasetFiles {
  std::string stream1;
  std::string stream2;
};

/// Writes `n` synthetic triplets as PNGs plus stream-1 and stream-2 manifests.
inline DatasetFiles write_dataset(const std::filesystem::path& dir, int n, int size, std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::ofstream s1(dir / "stream1.jsonl"), s2(dir / "stream2.jsonl");
  for (int i = 0; i < n; ++i) {
    const auto t = synthetic_triplet(rng, size);
    const std::string id = "img" + std::to_string(i);
    save_image(t.original, (dir / (id + ".png")).string());
    save_image(t.retouched, (dir / (id + "_edit.png")).string());
    save_mask(t.mask, (dir / (id + "_mask.png")).string());
    s1 << "{\"id\":\"" << id << "\",\"image\":\"" << id << ".png\",\"retouched\":\"" << id
       << "_edit.png\",\"mask\":\"" << id << "_mask.png\"}\n";
    s2 << "{\"id\":\"" << id << "\",\"image\":\"" << id << ".png\",\"mask\":\"" << id << "_mask.png\"}\n";
  }
  return {(dir / "stream1.jsonl").string(), (dir / "stream2.jsonl").string()};
}

/// Returns the input unchanged: the "identity inpaint" oracle.
class IdentityInpaint final : public InpaintProvider {
 public:
  ImageTensor inpaint(const ImageTensor& img, const MaskTensor&) const override { return img; }
};

}  // namespace harmonia::testing
