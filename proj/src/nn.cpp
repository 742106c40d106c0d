#include <harmonia/nn.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace harmonia {

using ad::Array;
using ad::Shape;
using ad::Tape;
using ad::Var;

namespace {

bool divisible(int resolution, std::size_t depth) {
  return resolution % (1 << depth) == 0 && (resolution >> depth) >= 1;
}

void add_conv(ad::ParameterStore& store, const std::string& name, int in, int out, int k = 3) {
  store.add(name + "/w", {out, in, k, k});
  store.add(name + "/b", {out});
}

/// Encoder-decoder with skip connections. Parameters live under `prefix`.
struct UNetSpec {
  std::string prefix;
  int in_channels;
  std::vector<int> widths;
  int out_channels;
};

void add_unet(ad::ParameterStore& store, const UNetSpec& spec) {
  int prev = spec.in_channels;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    add_conv(store, spec.prefix + "/enc" + std::to_string(i), prev, spec.widths[i]);
    prev = spec.widths[i];
  }
  int up = spec.widths.back();
  for (int level = int(spec.widths.size()) - 1; level >= 1; --level) {
    const int skip = spec.widths[std::size_t(level - 1)];
    add_conv(store, spec.prefix + "/dec" + std::to_string(level), up + skip,
             spec.widths[std::size_t(level - 1)]);
    up = spec.widths[std::size_t(level - 1)];
  }
  add_conv(store, spec.prefix + "/out", up + spec.in_channels, spec.out_channels);
}

Var param(Tape& tape, ad::ParameterStore& store, const std::string& name) {
  return tape.parameter(store.at(name));
}

Var conv_layer(Tape& tape, ad::ParameterStore& store, const std::string& name, const Var& x,
               int stride) {
  return ad::conv2d(x, param(tape, store, name + "/w"), param(tape, store, name + "/b"), stride, 1);
}

Var unet_forward(Tape& tape, ad::ParameterStore& store, const UNetSpec& spec, const Var& input,
                 double slope) {
  std::vector<Var> skips{input};
  Var h = input;
  for (std::size_t i = 0; i < spec.widths.size(); ++i) {
    h = ad::leaky_relu(conv_layer(tape, store, spec.prefix + "/enc" + std::to_string(i), h, 2), slope);
    skips.push_back(h);
  }
  for (int level = int(spec.widths.size()) - 1; level >= 0; --level) {
    const Var& skip = skips[std::size_t(level)];
    h = ad::resize_bilinear(h, skip.shape()[2], skip.shape()[3]);
    h = ad::concat_channels({h, skip});
    if (level > 0) {
      h = ad::leaky_relu(conv_layer(tape, store, spec.prefix + "/dec" + std::to_string(level), h, 1), slope);
    } else {
      h = conv_layer(tape, store, spec.prefix + "/out", h, 1);
    }
  }
  return h;
}

void kaiming_uniform(ad::Parameter& p, std::mt19937_64& rng, double slope, double gain = 1.0) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < p.shape.size(); ++i) fan_in *= p.shape[i];
  const double bound = gain * std::sqrt(6.0 / ((1.0 + slope * slope) * double(fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value) v = dist(rng);
}

bool is_bias(const ad::Parameter& p) { return p.name.size() >= 2 && p.name.ends_with("/b"); }

UNetSpec shading_spec(const PredictorConfig& c) {
  return {"G/shade", 3 + 3 + 1 + 3, c.shading_widths, 1};
}

UNetSpec disc_spec(const DiscriminatorConfig& c) { return {"D", 3, c.widths, 1}; }

int curve_outputs(const PredictorConfig& c) {
  return kCurveChannels * (c.curve_nodes - 1) + kCurveChannels * c.curve_nodes;
}

}  // namespace

void PredictorConfig::validate() const {
  if (resolution < 1) throw std::invalid_argument("predictor: resolution must be positive");
  if (curve_nodes < 2) throw std::invalid_argument("predictor: curve_nodes must be >= 2");
  if (grid < 1 || grid > resolution) throw std::invalid_argument("predictor: grid must be in [1, resolution]");
  if (curve_widths.empty() || shading_widths.empty()) throw std::invalid_argument("predictor: empty widths");
  if (!divisible(resolution, curve_widths.size()) || !divisible(resolution, shading_widths.size())) {
    throw std::invalid_argument("predictor: resolution must be divisible by 2^depth");
  }
  if (!(gain_max > 0) || !(gain_floor > 0) || gain_floor > gain_max) {
    throw std::invalid_argument("predictor: invalid gain bounds");
  }
}

void DiscriminatorConfig::validate() const {
  if (widths.empty() || !divisible(resolution, widths.size())) {
    throw std::invalid_argument("discriminator: resolution must be divisible by 2^depth");
  }
}

HarmonizationParams to_params(const ParamsVar& out, int index) {
  const int k = out.curve_x.shape()[2];
  const int g = out.shading.shape()[2];
  HarmonizationParams p;
  p.curves.x = Eigen::Map<const CurveParams::Nodes>(out.curve_x.value().data() + std::ptrdiff_t(index) * 3 * k, 3, k);
  p.curves.y = Eigen::Map<const CurveParams::Nodes>(out.curve_y.value().data() + std::ptrdiff_t(index) * 3 * k, 3, k);
  p.shading.grid = Eigen::Map<const ShadingMap::Grid>(out.shading.value().data() + std::ptrdiff_t(index) * g * g, g, g);
  return p;
}

Array to_nchw(const std::vector<const ImageTensor*>& images) {
  if (images.empty()) throw std::invalid_argument("to_nchw: empty batch");
  const int h = images[0]->height(), w = images[0]->width(), c = images[0]->channels();
  const std::int64_t plane = std::int64_t(h) * w;
  Array out(std::int64_t(images.size()) * c * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = *images[n];
    if (img.height() != h || img.width() != w || img.channels() != c) {
      throw std::invalid_argument("to_nchw: batch items differ in shape");
    }
    for (int ch = 0; ch < c; ++ch) {
      for (std::int64_t p = 0; p < plane; ++p) {
        out[(std::int64_t(n) * c + ch) * plane + p] = img.data()[p * c + ch];
      }
    }
  }
  return out;
}

Array to_nchw(const std::vector<const MaskTensor*>& masks) {
  if (masks.empty()) throw std::invalid_argument("to_nchw: empty batch");
  const std::int64_t plane = masks[0]->pixels();
  Array out(std::int64_t(masks.size()) * plane);
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n]->pixels() != plane) throw std::invalid_argument("to_nchw: batch items differ in shape");
    out.segment(std::int64_t(n) * plane, plane) = masks[n]->data().cast<double>();
  }
  return out;
}

ImageTensor from_nchw(const Array& data, int index, int channels, int height, int width) {
  ImageTensor img(height, width, channels);
  const std::int64_t plane = std::int64_t(height) * width;
  for (int c = 0; c < channels; ++c) {
    for (std::int64_t p = 0; p < plane; ++p) {
      img.data()[p * channels + c] = float(data[(std::int64_t(index) * channels + c) * plane + p]);
    }
  }
  img.clamp_unit();
  return img;
}

// ---------------------------------------------------------------------------

Predictor::Predictor(PredictorConfig config) : config_(std::move(config)) {
  config_.validate();
  auto& store = graph_.parameters;
  int prev = 7;
  for (std::size_t i = 0; i < config_.curve_widths.size(); ++i) {
    add_conv(store, "G/curve/conv" + std::to_string(i), prev, config_.curve_widths[i]);
    prev = config_.curve_widths[i];
  }
  store.add("G/curve/head/w", {curve_outputs(config_), prev});
  store.add("G/curve/head/b", {curve_outputs(config_)});
  add_unet(store, shading_spec(config_));
}

void Predictor::initialize(std::uint64_t seed, bool zero_heads) {
  std::mt19937_64 rng(seed);
  for (auto& p : graph_.parameters) {
    const bool head = p.name.starts_with("G/curve/head/") || p.name.starts_with("G/shade/out/");
    if (is_bias(p)) {
      p.value.setZero();
      if (head && !zero_heads) {
        std::uniform_real_distribution<double> dist(-0.1, 0.1);
        for (auto& v : p.value) v = dist(rng);
      }
    } else if (head && zero_heads) {
      p.value.setZero();
    } else {
      kaiming_uniform(p, rng, config_.leaky_slope, head ? 0.5 : 1.0);
    }
    p.grad.setZero();
  }
}

Var Predictor::conv(Tape& tape, const std::string& name, const Var& x, int stride) {
  return conv_layer(tape, graph_.parameters, name, x, stride);
}

ParamsVar Predictor::forward(Tape& tape, const Var& composite, const Var& background, const Var& mask) {
  const int r = config_.resolution;
  const auto& s = composite.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != r || s[3] != r || background.shape() != s ||
      mask.shape() != Shape{s[0], 1, r, r}) {
    throw std::invalid_argument("forward_predictor: expected inputs [N,3," + std::to_string(r) + "," +
                                std::to_string(r) + "] x2 and [N,1,...], got " + ad::shape_string(s));
  }
  const int n = s[0];
  const int k = config_.curve_nodes;
  auto& store = graph_.parameters;
  const Var input = ad::concat_channels({composite, background, mask});

  Var h = input;
  for (std::size_t i = 0; i < config_.curve_widths.size(); ++i) {
    h = ad::leaky_relu(conv(tape, "G/curve/conv" + std::to_string(i), h, 2), config_.leaky_slope);
  }
  const Var raw = ad::linear(ad::global_avg_pool(h), param(tape, store, "G/curve/head/w"),
                             param(tape, store, "G/curve/head/b"));
  const int nx = kCurveChannels * (k - 1);
  ParamsVar out;
  out.curve_x = ad::curve_knots(ad::reshape(ad::slice_cols(raw, 0, nx), {n, kCurveChannels, k - 1}));
  out.curve_y = ad::sigmoid(ad::reshape(ad::slice_cols(raw, nx, kCurveChannels * k), {n, kCurveChannels, k}));

  const Var corrected = ad::apply_curves(composite, mask, out.curve_x, out.curve_y);
  Var shade = unet_forward(tape, store, shading_spec(config_), ad::concat_channels({input, corrected}),
                           config_.leaky_slope);
  if (config_.grid != r) shade = ad::resize_bilinear(shade, config_.grid, config_.grid);
  out.shading = ad::shading_gain(shade, config_.gain_max, config_.gain_floor);
  return out;
}

Var Predictor::render(const ParamsVar& params, const Var& composite, const Var& mask) {
  const int h = composite.shape()[2], w = composite.shape()[3];
  const Var corrected = ad::apply_curves(composite, mask, params.curve_x, params.curve_y);
  return ad::apply_shading(corrected, mask, ad::resize_bilinear(params.shading, h, w));
}

HarmonizationParams Predictor::predict(const ImageTensor& composite, const ImageTensor& background,
                                       const MaskTensor& mask) {
  const int r = config_.resolution;
  const ImageTensor c = resize_bilinear(composite, r, r);
  const ImageTensor b = resize_bilinear(background, r, r);
  const MaskTensor m = resize_bilinear(mask, r, r);
  Tape& tape = graph_.tape;
  tape.clear();
  const Var cv = tape.constant({1, 3, r, r}, to_nchw({&c}));
  const Var bv = tape.constant({1, 3, r, r}, to_nchw({&b}));
  const Var mv = tape.constant({1, 1, r, r}, to_nchw({&m}));
  const ParamsVar out = forward(tape, cv, bv, mv);
  HarmonizationParams params = to_params(out, 0);
  tape.clear();
  return params;
}

// ---------------------------------------------------------------------------

Discriminator::Discriminator(DiscriminatorConfig config) : config_(std::move(config)) {
  config_.validate();
  add_unet(graph_.parameters, disc_spec(config_));
}

void Discriminator::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : graph_.parameters) {
    if (is_bias(p)) p.value.setZero();
    else kaiming_uniform(p, rng, config_.leaky_slope);
    p.grad.setZero();
  }
}

Var Discriminator::forward(Tape& tape, const Var& img) {
  const auto& s = img.shape();
  if (s.size() != 4 || s[1] != 3 || !divisible(s[2], config_.widths.size()) ||
      !divisible(s[3], config_.widths.size())) {
    throw std::invalid_argument("forward_discriminator: expected [N,3,H,W] with H,W divisible by 2^depth, got " +
                                ad::shape_string(s));
  }
  return ad::sigmoid(unet_forward(tape, graph_.parameters, disc_spec(config_), img, config_.leaky_slope));
}

}  // namespace harmonia
