#include <harmonia/data_streams.hpp>

#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include <openssl/evp.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>

namespace harmonia {

namespace fs = std::filesystem;

void RetouchTriplet::validate() const {
  detail::require_same_size(original, retouched, "RetouchTriplet", "retouched");
  detail::require_same_size(original, mask, "RetouchTriplet", "mask");
  if (original.channels() != retouched.channels()) throw std::invalid_argument("RetouchTriplet: channel mismatch");
}

void CompositeSample::validate() const {
  detail::require_same_size(composite, background, "CompositeSample", "background");
  detail::require_same_size(composite, mask, "CompositeSample", "mask");
  if ((stream == Stream::Supervised) != target.has_value()) {
    throw std::invalid_argument("CompositeSample: target must be present exactly for supervised samples");
  }
  if (target) detail::require_same_size(composite, *target, "CompositeSample", "target");
  if (real) detail::require_same_size(composite, *real, "CompositeSample", "real");
}

// ---------------------------------------------------------------------------
// Inpainting

ImageTensor naive_inpaint(const ImageTensor& img, const MaskTensor& mask, const DiffusionOptions& options) {
  detail::require_same_size(img, mask, "naive_inpaint", "mask");
  const int h = img.height(), w = img.width(), ch = img.channels();
  const Eigen::Index n = img.pixels();
  std::vector<char> unknown(static_cast<std::size_t>(n));
  Eigen::Index known = 0;
  for (Eigen::Index p = 0; p < n; ++p) {
    unknown[std::size_t(p)] = mask.data()[p] > 0.0f;
    known += !unknown[std::size_t(p)];
  }
  if (known == n) return img;
  if (known == 0) throw std::invalid_argument("naive_inpaint: mask covers the whole image, nothing to diffuse from");

  Eigen::ArrayXd field = img.data().cast<double>();
  for (int c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
      if (!unknown[std::size_t(p)]) mean += field[p * ch + c];
    }
    mean /= double(known);
    for (Eigen::Index p = 0; p < n; ++p) {
      if (unknown[std::size_t(p)]) field[p * ch + c] = mean;
    }
  }

  Eigen::ArrayXd next = field;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    double max_change = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Index p = Eigen::Index(y) * w + x;
        if (!unknown[std::size_t(p)]) continue;
        for (int c = 0; c < ch; ++c) {
          double s = 0.0;
          int count = 0;
          if (y > 0) { s += field[(p - w) * ch + c]; ++count; }
          if (y + 1 < h) { s += field[(p + w) * ch + c]; ++count; }
          if (x > 0) { s += field[(p - 1) * ch + c]; ++count; }
          if (x + 1 < w) { s += field[(p + 1) * ch + c]; ++count; }
          const double v = count ? s / count : field[p * ch + c];
          max_change = std::max(max_change, std::abs(v - field[p * ch + c]));
          next[p * ch + c] = v;
        }
      }
    }
    std::swap(field, next);
    if (max_change < options.tolerance) break;
  }

  ImageTensor out = img;
  for (Eigen::Index p = 0; p < n; ++p) {
    if (!unknown[std::size_t(p)]) continue;
    const float m = mask.data()[p];
    for (int c = 0; c < ch; ++c) {
      const float fill = static_cast<float>(std::clamp(field[p * ch + c], 0.0, 1.0));
      out.data()[p * ch + c] = std::lerp(img.data()[p * ch + c], fill, m);
    }
  }
  return out;
}

void restore_known_pixels(const ImageTensor& img, const MaskTensor& mask, ImageTensor& filled) {
  detail::require_same_size(img, filled, "inpaint", "output");
  if (img.channels() != filled.channels()) throw std::invalid_argument("inpaint: output channel mismatch");
  const int ch = img.channels();
  for (Eigen::Index p = 0; p < img.pixels(); ++p) {
    if (mask.data()[p] != 0.0f) continue;
    for (int c = 0; c < ch; ++c) filled.data()[p * ch + c] = img.data()[p * ch + c];
  }
}

ImageTensor SubprocessInpaint::inpaint(const ImageTensor& img, const MaskTensor& mask) const {
  const fs::path dir = fs::temp_directory_path() /
                       ("harmonia-inpaint-" + std::to_string(::getpid()) + "-" + content_hash(img, mask).substr(0, 16));
  fs::create_directories(dir);
  const std::string in = (dir / "in.png").string();
  const std::string mk = (dir / "mask.png").string();
  const std::string out = (dir / "out.png").string();
  save_image(img, in, 16);
  save_mask(mask, mk, 16);

  const pid_t pid = ::fork();
  if (pid < 0) throw IoError(program_, "fork failed");
  if (pid == 0) {
    ::execlp(program_.c_str(), program_.c_str(), in.c_str(), mk.c_str(), out.c_str(), static_cast<char*>(nullptr));
    std::_Exit(127);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    fs::remove_all(dir);
    throw IoError(program_, "external inpainter failed with status " + std::to_string(WEXITSTATUS(status)));
  }
  ImageTensor filled = load_image(out);
  fs::remove_all(dir);
  if (filled.channels() != img.channels()) throw IoError(program_, "external inpainter changed channel count");
  restore_known_pixels(img, mask, filled);
  return filled;
}

std::string content_hash(const ImageTensor& img, const MaskTensor& mask) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  const std::int32_t dims[5] = {img.height(), img.width(), img.channels(), mask.height(), mask.width()};
  EVP_DigestUpdate(ctx, dims, sizeof(dims));
  EVP_DigestUpdate(ctx, img.data().data(), std::size_t(img.data().size()) * sizeof(float));
  EVP_DigestUpdate(ctx, mask.data().data(), std::size_t(mask.data().size()) * sizeof(float));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

CachedInpaint::CachedInpaint(std::shared_ptr<const InpaintProvider> inner, std::string dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  fs::create_directories(dir_);
}

std::string CachedInpaint::cache_path(const ImageTensor& img, const MaskTensor& mask) const {
  return (fs::path(dir_) / (content_hash(img, mask) + ".png")).string();
}

ImageTensor CachedInpaint::inpaint(const ImageTensor& img, const MaskTensor& mask) const {
  const std::string path = cache_path(img, mask);
  if (!fs::exists(path)) {
    const ImageTensor filled = inner_->inpaint(img, mask);
    const std::string tmp = path + ".tmp" + std::to_string(::getpid());
    write_file(tmp, encode_png(filled, 16));
    fs::rename(tmp, path);
  }
  ImageTensor cached = decode_png(read_file(path), path).image;
  if (cached.height() != img.height() || cached.width() != img.width() || cached.channels() != img.channels()) {
    throw IoError(path, "cached inpaint has wrong dimensions");
  }
  restore_known_pixels(img, mask, cached);
  return cached;
}

std::shared_ptr<const InpaintProvider> make_inpaint_provider(const std::string& program,
                                                             const std::string& cache_dir) {
  std::shared_ptr<const InpaintProvider> base;
  if (program.empty()) base = std::make_shared<NaiveInpaint>();
  else base = std::make_shared<SubprocessInpaint>(program);
  if (cache_dir.empty()) return base;
  return std::make_shared<CachedInpaint>(base, cache_dir);
}

// ---------------------------------------------------------------------------
// Sample formation

std::pair<CompositeSample, CompositeSample> stream1_samples(const RetouchTriplet& t) {
  t.validate();
  const MaskTensor inv = t.mask.inverted();
  CompositeSample a;
  a.composite = composite(t.retouched, t.original, t.mask);
  a.background = masked(a.composite, inv);
  a.mask = t.mask;
  a.target = t.original;
  a.real = t.original;
  a.stream = Stream::Supervised;

  CompositeSample b;
  b.composite = composite(t.original, t.retouched, t.mask);
  b.background = masked(b.composite, inv);
  b.mask = t.mask;
  b.target = t.retouched;
  b.real = t.retouched;
  b.stream = Stream::Supervised;
  return {std::move(a), std::move(b)};
}

ImageTensor inpainted_background(const ImageTensor& img, const MaskTensor& mask,
                                 const InpaintProvider& inpaint, int dilation) {
  detail::require_same_size(img, mask, "inpainted_background", "mask");
  return inpaint.inpaint(img, dilate_mask(mask, dilation));
}

CompositeSample stream2_composite(const ImageTensor& fg_image, const MaskTensor& fg_mask,
                                  const ImageTensor& bg_image, const MaskTensor& bg_mask,
                                  const InpaintProvider& inpaint, int dilation) {
  detail::require_same_size(fg_image, bg_image, "stream2_composite", "background image");
  CompositeSample s;
  s.background = inpainted_background(bg_image, bg_mask, inpaint, dilation);
  s.composite = composite(fg_image, s.background, fg_mask);
  s.mask = fg_mask;
  s.stream = Stream::Unsupervised;
  s.real = composite(bg_image, s.background, bg_mask);
  return s;
}

ImageTensor fallback_background(const ImageTensor& composite, const MaskTensor& mask) {
  if ((mask.data() == 0.0f).any()) return naive_inpaint(composite, mask);
  return masked(composite, mask.inverted());
}

ImageTensor make_real_sample(const ImageTensor& img, const MaskTensor& mask,
                             const InpaintProvider& inpaint, int dilation) {
  return composite(img, inpainted_background(img, mask, inpaint, dilation), mask);
}

// ---------------------------------------------------------------------------
// Sampling

void SamplerConfig::validate() const {
  if (!(brightness_min > 0.0) || brightness_max < brightness_min) {
    throw ConfigError("brightness range must satisfy 0 < min <= max");
  }
  if (dilation < 0) throw ConfigError("dilation must be non-negative");
}

SampleSource::SampleSource(std::vector<RetouchTriplet> triplets, std::vector<RealImage> reals,
                           SamplerConfig config)
    : triplets_(std::move(triplets)), reals_(std::move(reals)), config_(config) {
  config_.validate();
  for (const auto& t : triplets_) t.validate();
}

std::vector<SampleSource::RealImage> SampleSource::prepare_reals(
    std::vector<std::pair<ImageTensor, MaskTensor>> images, const InpaintProvider& inpaint, int dilation) {
  std::vector<RealImage> reals;
  for (auto& [img, mask] : images) {
    ImageTensor bg = inpainted_background(img, mask, inpaint, dilation);
    reals.push_back({std::move(img), std::move(mask), std::move(bg)});
  }
  return reals;
}

SampleSource SampleSource::from_manifests(const std::string& stream1_manifest,
                                          const std::string& stream2_manifest, int resolution,
                                          const InpaintProvider& inpaint, SamplerConfig config) {
  std::vector<RetouchTriplet> triplets;
  if (!stream1_manifest.empty()) {
    for (const auto& e : load_manifest(stream1_manifest, kStream1Keys).entries) {
      triplets.push_back({resize_bilinear(load_image(e.at("image")), resolution, resolution),
                          resize_bilinear(load_image(e.at("retouched")), resolution, resolution),
                          resize_bilinear(load_mask(e.at("mask")), resolution, resolution)});
      if (triplets.back().original.channels() != 3 || triplets.back().retouched.channels() != 3) {
        throw ParseError(e.id, "stream-1 images must be RGB");
      }
    }
  }
  std::vector<std::pair<ImageTensor, MaskTensor>> images;
  if (!stream2_manifest.empty()) {
    for (const auto& e : load_manifest(stream2_manifest, kStream2Keys).entries) {
      images.emplace_back(resize_bilinear(load_image(e.at("image")), resolution, resolution),
                          resize_bilinear(load_mask(e.at("mask")), resolution, resolution));
      if (images.back().first.channels() != 3) throw ParseError(e.id, "stream-2 images must be RGB");
    }
  }
  return SampleSource(std::move(triplets), prepare_reals(std::move(images), inpaint, config.dilation), config);
}

void SampleSource::require(Stream stream) const {
  if (stream == Stream::Supervised && triplets_.empty()) {
    throw ConfigError("stream 1 selected but the triplet manifest is empty");
  }
  if (stream == Stream::Unsupervised && reals_.size() < 2) {
    throw ConfigError("stream 2 selected but fewer than 2 images are available (pairs need i != j)");
  }
}

CompositeSample SampleSource::draw_supervised(std::mt19937_64& rng) const {
  require(Stream::Supervised);
  std::uniform_int_distribution<std::size_t> pick(0, triplets_.size() - 1);
  const auto& t = triplets_[pick(rng)];
  std::bernoulli_distribution which(0.5);
  auto [a, b] = stream1_samples(t);
  CompositeSample s = which(rng) ? std::move(b) : std::move(a);
  if (config_.augment_brightness) {
    std::uniform_real_distribution<double> factor(config_.brightness_min, config_.brightness_max);
    s.composite = adjust_brightness(s.composite, s.mask, factor(rng));
  }
  return s;
}

CompositeSample SampleSource::draw_unsupervised(std::mt19937_64& rng) const {
  require(Stream::Unsupervised);
  std::uniform_int_distribution<std::size_t> pick(0, reals_.size() - 1);
  const std::size_t i = pick(rng);
  std::uniform_int_distribution<std::size_t> other(0, reals_.size() - 2);
  std::size_t j = other(rng);
  if (j >= i) ++j;
  const auto& bg = reals_[i];
  const auto& fg = reals_[j];
  CompositeSample s;
  s.background = bg.inpainted;
  s.composite = composite(fg.image, bg.inpainted, fg.mask);
  s.mask = fg.mask;
  s.stream = Stream::Unsupervised;
  s.real = composite(bg.image, bg.inpainted, bg.mask);
  return s;
}

CompositeSample SampleSource::draw(std::mt19937_64& rng, Stream stream) const {
  return stream == Stream::Supervised ? draw_supervised(rng) : draw_unsupervised(rng);
}

std::vector<CompositeSample> sample_batch(std::mt19937_64& rng, const SampleSource& source, int batch,
                                          double stream_probability) {
  if (!(stream_probability >= 0.0 && stream_probability <= 1.0)) {
    throw ConfigError("stream_probability must be in [0,1]");
  }
  if (stream_probability > 0.0) source.require(Stream::Supervised);
  if (stream_probability < 1.0) source.require(Stream::Unsupervised);
  std::bernoulli_distribution supervised(stream_probability);
  std::vector<CompositeSample> out;
  out.reserve(std::size_t(batch));
  for (int i = 0; i < batch; ++i) {
    out.push_back(source.draw(rng, supervised(rng) ? Stream::Supervised : Stream::Unsupervised));
  }
  return out;
}

std::vector<CompositeSample> sample_stream_batch(std::mt19937_64& rng, const SampleSource& source,
                                                 Stream stream, int batch) {
  source.require(stream);
  std::vector<CompositeSample> out;
  out.reserve(std::size_t(batch));
  for (int i = 0; i < batch; ++i) out.push_back(source.draw(rng, stream));
  return out;
}

}  // namespace harmonia
