#pragma once

#include <harmonia/image.hpp>
#include <harmonia/manifest.hpp>

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace harmonia {

/// Artist before/after pair with its foreground mask.
struct RetouchTriplet {
  ImageTensor original;
  ImageTensor retouched;
  MaskTensor mask;

  void validate() const;
};

enum class Stream { Supervised, Unsupervised };

inline const char* stream_tag(Stream s) { return s == Stream::Supervised ? "s1" : "s2"; }

struct CompositeSample {
  ImageTensor composite;
  ImageTensor background;
  MaskTensor mask;
  /// Ground truth; present exactly for supervised samples.
  std::optional<ImageTensor> target;
  Stream stream = Stream::Supervised;
  /// Discriminator "real" image paired with this sample: the target for
  /// supervised samples, the background image's own foreground pasted back
  /// onto its inpainted background for unsupervised ones.
  std::optional<ImageTensor> real;

  void validate() const;
};

/// Fills the masked region of an image. Implementations must return the
/// input unchanged wherever the mask is 0.
class InpaintProvider {
 public:
  virtual ~InpaintProvider() = default;
  virtual ImageTensor inpaint(const ImageTensor& img, const MaskTensor& mask) const = 0;
};

struct DiffusionOptions {
  double tolerance = 1e-4;
  int max_iterations = 500;
};

/// Jacobi diffusion from the known pixels (mask == 0) into the unknown ones
/// (mask > 0); soft mask values blend the fill with the original.
/// Throws std::invalid_argument when no pixel is known.
ImageTensor naive_inpaint(const ImageTensor& img, const MaskTensor& mask,
                          const DiffusionOptions& options = {});

class NaiveInpaint final : public InpaintProvider {
 public:
  explicit NaiveInpaint(DiffusionOptions options = {}) : options_(options) {}
  ImageTensor inpaint(const ImageTensor& img, const MaskTensor& mask) const override {
    return naive_inpaint(img, mask, options_);
  }

 private:
  DiffusionOptions options_;
};

/// Runs `<program> <in.png> <mask.png> <out.png>`; exit status 0 means
/// success. Pixels outside the mask are restored from the input.
class SubprocessInpaint final : public InpaintProvider {
 public:
  explicit SubprocessInpaint(std::string program) : program_(std::move(program)) {}
  ImageTensor inpaint(const ImageTensor& img, const MaskTensor& mask) const override;

 private:
  std::string program_;
};

/// Disk cache in front of another provider: <dir>/<sha256 of image+mask>.png.
/// Results always pass through the cached 16-bit encoding, so first and
/// repeated runs see identical pixels.
class CachedInpaint final : public InpaintProvider {
 public:
  CachedInpaint(std::shared_ptr<const InpaintProvider> inner, std::string dir);
  ImageTensor inpaint(const ImageTensor& img, const MaskTensor& mask) const override;
  std::string cache_path(const ImageTensor& img, const MaskTensor& mask) const;

 private:
  std::shared_ptr<const InpaintProvider> inner_;
  std::string dir_;
};

/// Built-in diffusion fill, or `program` when non-empty; wrapped in a
/// CachedInpaint when `cache_dir` is non-empty.
std::shared_ptr<const InpaintProvider> make_inpaint_provider(const std::string& program,
                                                             const std::string& cache_dir);

/// Hex SHA-256 over the image and mask sample data and dimensions.
std::string content_hash(const ImageTensor& img, const MaskTensor& mask);

/// Copies img into `filled` wherever mask == 0.
void restore_known_pixels(const ImageTensor& img, const MaskTensor& mask, ImageTensor& filled);

/// Composite A: foreground retouched, target the original. Composite B:
/// background retouched, target the retouched image.
std::pair<CompositeSample, CompositeSample> stream1_samples(const RetouchTriplet& t);

inline constexpr int kDefaultDilation = 30;

/// inpaint(image, dilate(mask, dilation)).
ImageTensor inpainted_background(const ImageTensor& img, const MaskTensor& mask,
                                 const InpaintProvider& inpaint, int dilation = kDefaultDilation);

/// Foreground j over the inpainted background of image i.
CompositeSample stream2_composite(const ImageTensor& fg_image, const MaskTensor& fg_mask,
                                  const ImageTensor& bg_image, const MaskTensor& bg_mask,
                                  const InpaintProvider& inpaint, int dilation = kDefaultDilation);

/// Background estimate when none is supplied: the composite's unmasked
/// pixels diffused into the masked region (all zero if nothing is unmasked).
ImageTensor fallback_background(const ImageTensor& composite, const MaskTensor& mask);

/// Foreground pasted back onto its own inpainted background.
ImageTensor make_real_sample(const ImageTensor& img, const MaskTensor& mask,
                             const InpaintProvider& inpaint, int dilation = kDefaultDilation);

struct SamplerConfig {
  double brightness_min = 0.5;
  double brightness_max = 1.5;
  int dilation = kDefaultDilation;
  bool augment_brightness = true;

  void validate() const;
};

/// In-memory training corpus at a common resolution, backgrounds inpainted
/// once up front.
class SampleSource {
 public:
  struct RealImage {
    ImageTensor image;
    MaskTensor mask;
    ImageTensor inpainted;
  };

  SampleSource(std::vector<RetouchTriplet> triplets, std::vector<RealImage> reals,
               SamplerConfig config = {});

  /// Loads and resizes manifest images; either path may be empty.
  static SampleSource from_manifests(const std::string& stream1_manifest,
                                     const std::string& stream2_manifest, int resolution,
                                     const InpaintProvider& inpaint, SamplerConfig config = {});

  /// Inpaints each image's dilated mask with `inpaint`.
  static std::vector<RealImage> prepare_reals(std::vector<std::pair<ImageTensor, MaskTensor>> images,
                                              const InpaintProvider& inpaint, int dilation);

  const std::vector<RetouchTriplet>& triplets() const { return triplets_; }
  const std::vector<RealImage>& reals() const { return reals_; }
  const SamplerConfig& config() const { return config_; }
  std::size_t size() const { return 2 * triplets_.size() + reals_.size(); }

  /// Random triplet, random one of its two composites, brightness-augmented
  /// foreground.
  CompositeSample draw_supervised(std::mt19937_64& rng) const;
  /// Random ordered pair i != j.
  CompositeSample draw_unsupervised(std::mt19937_64& rng) const;
  CompositeSample draw(std::mt19937_64& rng, Stream stream) const;

  /// Throws ConfigError if `stream` cannot be sampled.
  void require(Stream stream) const;

 private:
  std::vector<RetouchTriplet> triplets_;
  std::vector<RealImage> reals_;
  SamplerConfig config_;
};

/// Each element independently drawn from stream 1 with probability p.
std::vector<CompositeSample> sample_batch(std::mt19937_64& rng, const SampleSource& source,
                                          int batch, double stream_probability = 0.5);

/// `batch` elements from a single stream.
std::vector<CompositeSample> sample_stream_batch(std::mt19937_64& rng, const SampleSource& source,
                                                 Stream stream, int batch);

}  // namespace harmonia
