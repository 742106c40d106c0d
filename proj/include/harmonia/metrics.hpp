#pragma once

#include <harmonia/image.hpp>

#include <string>
#include <vector>

namespace harmonia {

inline constexpr double kPsnrSentinel = 99.0;

/// Mean over elements of (255 (pred - gt))^2.
double mse_255(const ImageTensor& pred, const ImageTensor& gt);
/// 10 log10(255^2 / mse), capped at kPsnrSentinel (identical images).
double psnr_from_mse(double mse);
double psnr(const ImageTensor& pred, const ImageTensor& gt);

/// Mean local SSIM on luma (single channel images as is) with an 11x11
/// Gaussian window, sigma 1.5, K1 0.01, K2 0.03, dynamic range 1, over the
/// positions where the window fits entirely.
double ssim(const ImageTensor& pred, const ImageTensor& gt);

struct PairwiseComparisons {
  struct Record {
    int a = 0;
    int b = 0;
    /// true when method a won.
    bool a_won = true;
  };
  std::vector<std::string> methods;
  std::vector<Record> records;

  int index_of(const std::string& method) const;
};

/// CSV with header "method_a,method_b,winner"; winner names one of the two.
PairwiseComparisons parse_comparisons_csv(const std::string& text);
PairwiseComparisons load_comparisons(const std::string& path);

struct BTResult {
  std::vector<std::string> methods;
  /// Normalised to sum 1.
  std::vector<double> scores;
  int iterations = 0;
  bool converged = false;
};

/// Bradley-Terry strengths by the MM iteration. Throws std::invalid_argument
/// listing the components when the comparison graph is disconnected.
BTResult bt_fit(const PairwiseComparisons& data, int max_iterations = 100000, double tolerance = 1e-10);

/// Log-likelihood sum over records of log(s_winner / (s_a + s_b)).
double bt_log_likelihood(const PairwiseComparisons& data, const std::vector<double>& scores);

struct ImageMetrics {
  std::string id;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  int resolution = 0;
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::vector<ImageMetrics> per_image;

  std::size_t n() const { return per_image.size(); }
  /// {"n","resolution","mse","psnr","ssim","lpips":null,"per_image":[...]}
  std::string to_json() const;
};

/// Aggregates are plain means of the per-image values.
MetricReport aggregate(std::vector<ImageMetrics> per_image, int resolution);
ImageMetrics image_metrics(const std::string& id, const ImageTensor& pred, const ImageTensor& gt);

/// Manifests need "id" and "image" per line and must hold the same ids.
/// Both images are resized to resolution x resolution before scoring.
MetricReport run_benchmark(const std::string& pred_manifest, const std::string& gt_manifest, int resolution);

}  // namespace harmonia
