#pragma once

#include <harmonia/checkpoint.hpp>
#include <harmonia/data_streams.hpp>
#include <harmonia/losses.hpp>
#include <harmonia/nn.hpp>

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace harmonia {

struct TrainConfig {
  int epochs = 80;
  int batch = 8;
  double lr = 4e-5;
  double lr_decay = 0.2;
  int decay_interval = 20;
  double lambda = 0.92;
  double stream_probability = 0.5;
  std::uint64_t seed = 0;
  int resolution = 64;
  /// 0 derives ceil(dataset size / batch).
  int steps_per_epoch = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::string stream1_manifest;
  std::string stream2_manifest;
  double brightness_min = 0.5;
  double brightness_max = 1.5;
  bool augment_brightness = true;
  int dilation = kDefaultDilation;
  /// Empty disables the inpaint cache (HARMONIA_CACHE overrides in the CLI).
  std::string inpaint_cache;
  /// External inpainter; empty selects the built-in diffusion fill.
  std::string inpaint_program;

  std::vector<int> curve_widths = PredictorConfig{}.curve_widths;
  std::vector<int> shading_widths = PredictorConfig{}.shading_widths;
  std::vector<int> disc_widths = DiscriminatorConfig{}.widths;
  int curve_nodes = kDefaultCurveNodes;
  int grid = kDefaultShadingGrid;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  PredictorConfig predictor() const;
  DiscriminatorConfig discriminator() const;
  SamplerConfig sampler() const;
  LossWeights weights() const { return {lambda, LossWeights{}.epsilon}; }
};

/// Reads a TOML file whose keys mirror the TrainConfig field names; unknown
/// keys are rejected. Relative manifest and cache paths resolve against the
/// file's directory.
TrainConfig load_train_config(const std::string& path);
TrainConfig parse_train_config(const std::string& text, const std::string& base_dir = ".");

/// lr · decay^floor(epoch / interval).
double lr_schedule(const TrainConfig& cfg, int epoch);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One bias-corrected update of every parameter from its current grad.
  void step(ad::ParameterStore& store, double lr);
  std::int64_t steps() const { return t_; }

  /// Moments live under "@adam/<prefix>/m/<param>" and ".../v/<param>".
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix, const ad::ParameterStore& store);

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<ad::Array, ad::Array>> moments_;
};

struct StepReport {
  Stream stream = Stream::Supervised;
  double gen = 0.0;
  double disc = 0.0;
  /// L1 reconstruction; supervised steps only.
  std::optional<double> rec;
  /// The generator objective that was minimised.
  double objective = 0.0;
};

/// Raised when a loss is NaN or infinite; what() carries the diagnostic dump.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One discriminator update on detached generator outputs followed by one
/// generator update. The batch must be non-empty and stream-homogeneous.
StepReport train_step(Predictor& g, Discriminator& d, Adam& g_opt, Adam& d_opt,
                      const std::vector<CompositeSample>& batch, const LossWeights& weights, double lr);

/// Saves and restores a predictor together with its architecture.
void put_predictor(Checkpoint& ckpt, const Predictor& g);
Predictor load_predictor(const Checkpoint& ckpt);
Predictor load_predictor_file(const std::string& path);

/// Step-indexed training state: step s always uses the generator seeded from
/// (seed, s), so a resumed run draws exactly the batches it would have drawn.
class Trainer {
 public:
  /// `source` may be null only when cfg.epochs == 0.
  Trainer(TrainConfig cfg, std::shared_ptr<const SampleSource> source);

  StepReport step();
  std::uint64_t step_index() const { return step_; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  int epoch() const { return int(step_ / std::uint64_t(steps_per_epoch_)); }
  double current_lr() const { return lr_schedule(cfg_, epoch()); }
  const TrainConfig& config() const { return cfg_; }

  /// Stream and batch that step `step` draws.
  std::vector<CompositeSample> draw_batch(std::uint64_t step) const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

  Predictor& predictor() { return g_; }
  Discriminator& discriminator() { return d_; }

 private:
  TrainConfig cfg_;
  std::shared_ptr<const SampleSource> source_;
  Predictor g_;
  Discriminator d_;
  Adam g_opt_, d_opt_;
  std::uint64_t step_ = 0;
  int steps_per_epoch_ = 1;
};

struct TrainingResult {
  std::string final_checkpoint;
  std::uint64_t steps = 0;
  bool resumed = false;
};

/// Loads the manifests named in cfg, trains, writes checkpoint_<epoch>.harm
/// (epoch 0 is the initial state) and latest.harm after every epoch, and
/// appends one JSON line per step to metrics.jsonl. Resumes from latest.harm
/// when present, dropping log lines past the restored step.
TrainingResult run_training(const TrainConfig& cfg, const std::string& out_dir);

/// JSON line for the metrics log.
std::string metrics_line(std::uint64_t step, int epoch, double lr, const StepReport& r);

}  // namespace harmonia
