#include <harmonia/metrics.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>
#include <harmonia/manifest.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace harmonia {

namespace {

void require_same_shape(const ImageTensor& a, const ImageTensor& b, const char* op) {
  detail::require_same_size(a, b, op, "gt");
  if (a.channels() != b.channels()) throw std::invalid_argument(std::string(op) + ": channel mismatch");
}

}  // namespace

double mse_255(const ImageTensor& pred, const ImageTensor& gt) {
  require_same_shape(pred, gt, "mse_255");
  if (pred.data().size() == 0) throw std::invalid_argument("mse_255: empty images");
  return (255.0 * (pred.data().cast<double>() - gt.data().cast<double>())).square().mean();
}

double psnr_from_mse(double mse) {
  if (mse < 0.0 || std::isnan(mse)) throw std::invalid_argument("psnr: mse must be non-negative");
  if (mse == 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double psnr(const ImageTensor& pred, const ImageTensor& gt) { return psnr_from_mse(mse_255(pred, gt)); }

// ---------------------------------------------------------------------------
// SSIM

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    w[std::size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += w[std::size_t(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Separable Gaussian filter keeping only fully covered positions.
Plane filter_valid(const Plane& in) {
  static const auto w = gaussian_window();
  const Eigen::Index oh = in.rows() - kWindow + 1, ow = in.cols() - kWindow + 1;
  Plane rows = Plane::Zero(in.rows(), ow);
  for (int k = 0; k < kWindow; ++k) rows += w[std::size_t(k)] * in.middleCols(k, ow);
  Plane out = Plane::Zero(oh, ow);
  for (int k = 0; k < kWindow; ++k) out += w[std::size_t(k)] * rows.middleRows(k, oh);
  return out;
}

Plane luma_plane(const ImageTensor& img) {
  const ImageTensor y = img.channels() == 1 ? img : to_luma(img);
  Plane p(y.height(), y.width());
  for (int r = 0; r < y.height(); ++r) {
    for (int c = 0; c < y.width(); ++c) p(r, c) = y(r, c, 0);
  }
  return p;
}

}  // namespace

double ssim(const ImageTensor& pred, const ImageTensor& gt) {
  require_same_shape(pred, gt, "ssim");
  if (pred.height() < kWindow || pred.width() < kWindow) {
    throw std::invalid_argument("ssim: image must be at least 11x11");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Plane x = luma_plane(pred), y = luma_plane(gt);
  const Plane mx = filter_valid(x), my = filter_valid(y);
  const Plane sxx = filter_valid(x * x) - mx * mx;
  const Plane syy = filter_valid(y * y) - my * my;
  const Plane sxy = filter_valid(x * y) - mx * my;
  const Plane num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
  const Plane den = (mx * mx + my * my + c1) * (sxx + syy + c2);
  return (num / den).mean();
}

// ---------------------------------------------------------------------------
// Pairwise comparisons

int PairwiseComparisons::index_of(const std::string& method) const {
  auto it = std::find(methods.begin(), methods.end(), method);
  return it == methods.end() ? -1 : int(it - methods.begin());
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

PairwiseComparisons parse_comparisons_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool header = false;
  PairwiseComparisons data;
  auto intern = [&](const std::string& m) {
    int i = data.index_of(m);
    if (i < 0) {
      data.methods.push_back(m);
      i = int(data.methods.size()) - 1;
    }
    return i;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = "line " + std::to_string(lineno);
    if (!header) {
      if (cells != std::vector<std::string>{"method_a", "method_b", "winner"}) {
        throw ParseError(where, "expected header method_a,method_b,winner");
      }
      header = true;
      continue;
    }
    if (cells.size() != 3 || cells[0].empty() || cells[1].empty()) throw ParseError(where, "expected 3 fields");
    if (cells[0] == cells[1]) throw ParseError(where, "a method cannot be compared with itself");
    if (cells[2] != cells[0] && cells[2] != cells[1]) {
      throw ParseError(where, "winner '" + cells[2] + "' is neither '" + cells[0] + "' nor '" + cells[1] + "'");
    }
    data.records.push_back({intern(cells[0]), intern(cells[1]), cells[2] == cells[0]});
  }
  if (!header) throw ParseError("line 1", "missing header");
  if (data.records.empty()) throw ParseError("", "no comparison records");
  return data;
}

PairwiseComparisons load_comparisons(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_comparisons_csv(text);
  } catch (const ParseError& e) {
    throw ParseError(e.field(), path + ": " + e.what());
  }
}

namespace {

std::vector<std::vector<int>> components(const PairwiseComparisons& data) {
  const int k = int(data.methods.size());
  std::vector<int> parent(static_cast<std::size_t>(k));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int i) {
    while (parent[std::size_t(i)] != i) i = parent[std::size_t(i)] = parent[std::size_t(parent[std::size_t(i)])];
    return i;
  };
  for (const auto& r : data.records) parent[std::size_t(find(r.a))] = find(r.b);
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < k; ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<int>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  return out;
}

}  // namespace

BTResult bt_fit(const PairwiseComparisons& data, int max_iterations, double tolerance) {
  const int k = int(data.methods.size());
  if (k < 2) throw std::invalid_argument("bt_fit: need at least two methods");
  for (const auto& r : data.records) {
    if (r.a < 0 || r.a >= k || r.b < 0 || r.b >= k || r.a == r.b) {
      throw std::invalid_argument("bt_fit: record references an unknown method");
    }
  }
  std::vector<int> seen(std::size_t(k), 0);
  for (const auto& r : data.records) seen[std::size_t(r.a)] = seen[std::size_t(r.b)] = 1;
  for (int i = 0; i < k; ++i) {
    if (!seen[std::size_t(i)]) throw std::invalid_argument("bt_fit: method '" + data.methods[std::size_t(i)] + "' has no records");
  }
  const auto comps = components(data);
  if (comps.size() > 1) {
    std::string msg = "bt_fit: comparison graph is disconnected; components:";
    for (const auto& c : comps) {
      msg += " {";
      for (std::size_t i = 0; i < c.size(); ++i) msg += (i ? ", " : "") + data.methods[std::size_t(c[i])];
      msg += "}";
    }
    throw std::invalid_argument(msg);
  }

  Eigen::ArrayXd wins = Eigen::ArrayXd::Zero(k);
  Eigen::MatrixXd games = Eigen::MatrixXd::Zero(k, k);
  for (const auto& r : data.records) {
    wins[r.a_won ? r.a : r.b] += 1.0;
    games(r.a, r.b) += 1.0;
    games(r.b, r.a) += 1.0;
  }

  BTResult result;
  result.methods = data.methods;
  Eigen::ArrayXd s = Eigen::ArrayXd::Constant(k, 1.0 / k);
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::ArrayXd next(k);
    for (int i = 0; i < k; ++i) {
      double denom = 0.0;
      for (int j = 0; j < k; ++j) {
        if (j != i && games(i, j) > 0.0) denom += games(i, j) / (s[i] + s[j]);
      }
      next[i] = wins[i] / denom;
    }
    // The update is scale-free; rescaling only keeps the iterates bounded.
    next /= next.sum();
    const double change = ((next - s).abs() / next.maxCoeff()).maxCoeff();
    s = next;
    result.iterations = it + 1;
    if (change <= tolerance) {
      result.converged = true;
      break;
    }
  }
  s /= s.sum();
  result.scores.assign(s.data(), s.data() + k);
  return result;
}

double bt_log_likelihood(const PairwiseComparisons& data, const std::vector<double>& scores) {
  double ll = 0.0;
  for (const auto& r : data.records) {
    const double sa = scores[std::size_t(r.a)], sb = scores[std::size_t(r.b)];
    ll += std::log((r.a_won ? sa : sb) / (sa + sb));
  }
  return ll;
}

// ---------------------------------------------------------------------------
// Benchmark

ImageMetrics image_metrics(const std::string& id, const ImageTensor& pred, const ImageTensor& gt) {
  ImageMetrics m;
  m.id = id;
  m.mse = mse_255(pred, gt);
  m.psnr = psnr_from_mse(m.mse);
  m.ssim = ssim(pred, gt);
  return m;
}

MetricReport aggregate(std::vector<ImageMetrics> per_image, int resolution) {
  if (per_image.empty()) throw std::invalid_argument("aggregate: no images");
  MetricReport r;
  r.resolution = resolution;
  for (const auto& m : per_image) {
    r.mse += m.mse;
    r.psnr += m.psnr;
    r.ssim += m.ssim;
  }
  const double n = double(per_image.size());
  r.mse /= n;
  r.psnr /= n;
  r.ssim /= n;
  r.per_image = std::move(per_image);
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["n"] = n();
  j["resolution"] = resolution;
  j["mse"] = mse;
  j["psnr"] = psnr;
  j["ssim"] = ssim;
  j["lpips"] = nullptr;
  auto per = nlohmann::ordered_json::array();
  for (const auto& m : per_image) {
    per.push_back({{"id", m.id}, {"mse", m.mse}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"lpips", nullptr}});
  }
  j["per_image"] = std::move(per);
  return j.dump();
}

MetricReport run_benchmark(const std::string& pred_manifest, const std::string& gt_manifest, int resolution) {
  if (resolution < 1) throw std::invalid_argument("run_benchmark: resolution must be positive");
  const DatasetManifest pred = load_manifest(pred_manifest, {"image"});
  const DatasetManifest gt = load_manifest(gt_manifest, {"image"});
  std::vector<std::string> missing_pred, missing_gt;
  for (const auto& e : gt.entries) {
    if (!pred.find(e.id)) missing_pred.push_back(e.id);
  }
  for (const auto& e : pred.entries) {
    if (!gt.find(e.id)) missing_gt.push_back(e.id);
  }
  if (!missing_pred.empty() || !missing_gt.empty()) {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
      return s;
    };
    std::string msg = "run_benchmark: manifests do not align;";
    if (!missing_pred.empty()) msg += " missing from predictions: " + join(missing_pred) + ";";
    if (!missing_gt.empty()) msg += " missing from ground truth: " + join(missing_gt) + ";";
    throw std::invalid_argument(msg);
  }
  std::vector<ImageMetrics> per;
  for (const auto& e : gt.entries) {
    const ImageTensor g = resize_bilinear(load_image(e.at("image")), resolution, resolution);
    const ImageTensor p = resize_bilinear(load_image(pred.find(e.id)->at("image")), resolution, resolution);
    per.push_back(image_metrics(e.id, p, g));
  }
  return aggregate(std::move(per), resolution);
}

}  // namespace harmonia
