#include <harmonia/trainer.hpp>

#include <harmonia/config_toml.hpp>
#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace harmonia {

namespace fs = std::filesystem;
using ad::Array;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  positive(batch, "batch");
  positive(decay_interval, "decay_interval");
  positive(resolution, "resolution");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in [0,1]");
  if (!(stream_probability >= 0.0 && stream_probability <= 1.0)) {
    throw ConfigError("stream_probability must be in [0,1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  sampler().validate();
  try {
    predictor().validate();
    discriminator().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

PredictorConfig TrainConfig::predictor() const {
  PredictorConfig p;
  p.resolution = resolution;
  p.curve_widths = curve_widths;
  p.shading_widths = shading_widths;
  p.curve_nodes = curve_nodes;
  p.grid = grid;
  return p;
}

DiscriminatorConfig TrainConfig::discriminator() const {
  DiscriminatorConfig d;
  d.resolution = resolution;
  d.widths = disc_widths;
  return d;
}

SamplerConfig TrainConfig::sampler() const {
  SamplerConfig s;
  s.brightness_min = brightness_min;
  s.brightness_max = brightness_max;
  s.dilation = dilation;
  s.augment_brightness = augment_brightness;
  return s;
}

namespace {

std::vector<int> to_ints(const std::vector<double>& v, const std::string& key) {
  std::vector<int> out;
  for (double x : v) {
    if (x != std::floor(x) || x < 1) throw ConfigError(key + ": expected positive integers");
    out.push_back(int(x));
  }
  return out;
}

std::string resolve(const std::string& path, const std::string& base) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, const std::string& base_dir) {
  const TomlTable t = TomlTable::parse(text);
  static const std::set<std::string> known = {
      "epochs", "batch", "lr", "lr_decay", "decay_interval", "lambda", "stream_probability",
      "seed", "resolution", "steps_per_epoch", "beta1", "beta2", "adam_eps", "stream1_manifest",
      "stream2_manifest", "brightness_min", "brightness_max", "augment_brightness", "dilation",
      "inpaint_cache", "inpaint_program", "curve_widths", "shading_widths", "disc_widths",
      "curve_nodes", "grid"};
  for (const auto& [key, value] : t.values()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig c;
  auto get_int = [&](const char* key, int& out) {
    if (auto v = t.get_int(key)) {
      if (*v < INT32_MIN || *v > INT32_MAX) throw ConfigError(std::string(key) + ": out of range");
      out = int(*v);
    }
  };
  auto get_double = [&](const char* key, double& out) {
    if (auto v = t.get_double(key)) out = *v;
  };
  get_int("epochs", c.epochs);
  get_int("batch", c.batch);
  get_double("lr", c.lr);
  get_double("lr_decay", c.lr_decay);
  get_int("decay_interval", c.decay_interval);
  get_double("lambda", c.lambda);
  get_double("stream_probability", c.stream_probability);
  if (auto v = t.get_int("seed")) {
    if (*v < 0) throw ConfigError("seed must be non-negative");
    c.seed = std::uint64_t(*v);
  }
  get_int("resolution", c.resolution);
  get_int("steps_per_epoch", c.steps_per_epoch);
  get_double("beta1", c.beta1);
  get_double("beta2", c.beta2);
  get_double("adam_eps", c.adam_eps);
  if (auto v = t.get_string("stream1_manifest")) c.stream1_manifest = resolve(*v, base_dir);
  if (auto v = t.get_string("stream2_manifest")) c.stream2_manifest = resolve(*v, base_dir);
  get_double("brightness_min", c.brightness_min);
  get_double("brightness_max", c.brightness_max);
  if (auto v = t.get_bool("augment_brightness")) c.augment_brightness = *v;
  get_int("dilation", c.dilation);
  if (auto v = t.get_string("inpaint_cache")) c.inpaint_cache = resolve(*v, base_dir);
  if (auto v = t.get_string("inpaint_program")) c.inpaint_program = *v;
  if (auto v = t.get_numbers("curve_widths")) c.curve_widths = to_ints(*v, "curve_widths");
  if (auto v = t.get_numbers("shading_widths")) c.shading_widths = to_ints(*v, "shading_widths");
  if (auto v = t.get_numbers("disc_widths")) c.disc_widths = to_ints(*v, "disc_widths");
  get_int("curve_nodes", c.curve_nodes);
  get_int("grid", c.grid);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_train_config(text, fs::path(path).parent_path().string());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  const double raw = cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.decay_interval);
  // Drop the last-bit noise of the product so 4e-5 * 0.2 is 8e-6.
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", raw);
  return std::strtod(buf, nullptr);
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(ad::ParameterStore& store, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto& p : store) {
    auto& [m, v] = moments_[p.name];
    if (m.size() == 0) {
      m = Array::Zero(p.value.size());
      v = Array::Zero(p.value.size());
    }
    m = beta1_ * m + (1.0 - beta1_) * p.grad;
    v = beta2_ * v + (1.0 - beta2_) * p.grad.square();
    p.value -= lr * (m / c1) / ((v / c2).sqrt() + eps_);
  }
}

void Adam::save(Checkpoint& ckpt, const std::string& prefix) const {
  const std::string base = "@adam/" + prefix;
  ckpt.put_scalars(base + "/t", {double(t_)});
  for (const auto& [name, mv] : moments_) {
    ckpt.put(base + "/m/" + name, {std::uint64_t(mv.first.size())}, mv.first);
    ckpt.put(base + "/v/" + name, {std::uint64_t(mv.second.size())}, mv.second);
  }
}

void Adam::load(const Checkpoint& ckpt, const std::string& prefix, const ad::ParameterStore& store) {
  const std::string base = "@adam/" + prefix;
  t_ = std::int64_t(ckpt.at(base + "/t").data[0]);
  moments_.clear();
  for (const auto& p : store) {
    const NamedArray* m = ckpt.find(base + "/m/" + p.name);
    const NamedArray* v = ckpt.find(base + "/v/" + p.name);
    if (!m && !v) continue;
    if (!m || !v || m->data.size() != p.value.size() || v->data.size() != p.value.size()) {
      throw CheckpointError("optimizer state for '" + p.name + "' is incomplete or mis-sized", 0);
    }
    moments_[p.name] = {m->data, v->data};
  }
}

// ---------------------------------------------------------------------------
// One training step

namespace {

std::string batch_dump(const std::vector<CompositeSample>& batch, double disc, double objective) {
  std::ostringstream os;
  os << "non-finite loss (disc=" << disc << ", generator objective=" << objective << ", stream "
     << stream_tag(batch[0].stream) << ", batch " << batch.size() << ")";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    os << "\n  sample " << i << ": composite min " << s.composite.data().minCoeff() << " max "
       << s.composite.data().maxCoeff() << " mean " << s.composite.data().mean() << "; mask mean "
       << s.mask.data().mean() << "; finite " << s.composite.data().allFinite();
  }
  return os.str();
}

}  // namespace

StepReport train_step(Predictor& g, Discriminator& d, Adam& g_opt, Adam& d_opt,
                      const std::vector<CompositeSample>& batch, const LossWeights& weights, double lr) {
  weights.validate();
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const Stream stream = batch[0].stream;
  std::vector<const ImageTensor*> comps, bgs, targets, reals;
  std::vector<const MaskTensor*> masks;
  for (const auto& s : batch) {
    s.validate();
    if (s.stream != stream) throw std::invalid_argument("train_step: batch mixes streams");
    comps.push_back(&s.composite);
    bgs.push_back(&s.background);
    masks.push_back(&s.mask);
    if (s.target) targets.push_back(&*s.target);
    if (s.real) reals.push_back(&*s.real);
  }
  if (!reals.empty() && reals.size() != batch.size()) {
    throw std::invalid_argument("train_step: real images present for only part of the batch");
  }
  const int n = int(batch.size());
  const int h = batch[0].composite.height(), w = batch[0].composite.width();
  const ad::Shape img_shape{n, 3, h, w}, mask_shape{n, 1, h, w};
  const Array c_data = to_nchw(comps), b_data = to_nchw(bgs), m_data = to_nchw(masks);

  // Generator forward; its detached output is the discriminator's fake batch.
  Tape& gt = g.graph().tape;
  gt.clear();
  const Var cv = gt.constant(img_shape, c_data);
  const Var bv = gt.constant(img_shape, b_data);
  const Var mv = gt.constant(mask_shape, m_data);
  const ParamsVar params = g.forward(gt, cv, bv, mv);
  const Var pred = g.render(params, cv, mv);

  StepReport report;
  report.stream = stream;
  {
    Tape& dt = d.graph().tape;
    dt.clear();
    d.parameters().zero_grad();
    Var real_scores;
    if (!reals.empty()) real_scores = d.forward(dt, dt.constant(img_shape, to_nchw(reals)));
    const Var fake_scores = d.forward(dt, dt.constant(img_shape, pred.value()));
    const Var loss = ad::disc_loss(real_scores, fake_scores, dt.constant(mask_shape, m_data), weights);
    report.disc = loss.item();
    if (!std::isfinite(report.disc)) {
      dt.clear();
      gt.clear();
      throw NonFiniteLoss(batch_dump(batch, report.disc, std::nan("")));
    }
    dt.backward(loss);
    d_opt.step(d.parameters(), lr);
    d.parameters().zero_grad();
  }

  g.parameters().zero_grad();
  const Var scores = d.forward(gt, pred);
  const Var gen = ad::gen_loss(scores, mv, weights);
  report.gen = gen.item();
  Var objective;
  if (stream == Stream::Supervised) {
    const Var target = gt.constant(img_shape, to_nchw(targets));
    report.rec = ad::l1_loss(pred, target).item();
    // At lambda = 1 the adversarial term carries no weight; skip its backward pass.
    objective = weights.lambda == 1.0 ? ad::l1_loss(pred, target)
                                      : ad::combined_supervised_loss(pred, target, scores, mv, weights);
  } else {
    objective = ad::scale(gen, 1.0 - weights.lambda);
  }
  report.objective = objective.item();
  if (!std::isfinite(report.objective) || !std::isfinite(report.gen)) {
    gt.clear();
    throw NonFiniteLoss(batch_dump(batch, report.disc, report.objective));
  }
  gt.backward(objective);
  d.parameters().zero_grad();
  g_opt.step(g.parameters(), lr);
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::vector<double> as_doubles(const std::vector<int>& v) { return {v.begin(), v.end()}; }

std::vector<int> as_ints(const NamedArray& a) {
  std::vector<int> out;
  for (double x : a.data) out.push_back(int(x));
  return out;
}

}  // namespace

void put_predictor(Checkpoint& ckpt, const Predictor& g) {
  const auto& c = g.config();
  ckpt.put_scalars("@predictor/config", {double(c.resolution), double(c.curve_nodes), double(c.grid), c.gain_max,
                                         c.gain_floor, c.leaky_slope});
  ckpt.put_scalars("@predictor/curve_widths", as_doubles(c.curve_widths));
  ckpt.put_scalars("@predictor/shading_widths", as_doubles(c.shading_widths));
  ckpt.put_parameters(g.parameters());
}

Predictor load_predictor(const Checkpoint& ckpt) {
  const NamedArray& cfg = ckpt.at("@predictor/config");
  if (cfg.data.size() != 6) throw CheckpointError("@predictor/config has the wrong length", 0);
  PredictorConfig c;
  c.resolution = int(cfg.data[0]);
  c.curve_nodes = int(cfg.data[1]);
  c.grid = int(cfg.data[2]);
  c.gain_max = cfg.data[3];
  c.gain_floor = cfg.data[4];
  c.leaky_slope = cfg.data[5];
  c.curve_widths = as_ints(ckpt.at("@predictor/curve_widths"));
  c.shading_widths = as_ints(ckpt.at("@predictor/shading_widths"));
  Predictor g(c);
  ckpt.get_parameters(g.parameters());
  return g;
}

Predictor load_predictor_file(const std::string& path) {
  try {
    return load_predictor(load_checkpoint_file(path));
  } catch (const std::out_of_range& e) {
    throw IoError(path, e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(path, e.what());
  }
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr std::uint64_t kDiscriminatorSeedOffset = 0x9e3779b97f4a7c15ULL;

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(step),
                    std::uint32_t(step >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::shared_ptr<const SampleSource> source)
    : cfg_(std::move(cfg)),
      source_(std::move(source)),
      g_(cfg_.predictor()),
      d_(cfg_.discriminator()),
      g_opt_(cfg_.beta1, cfg_.beta2, cfg_.adam_eps),
      d_opt_(cfg_.beta1, cfg_.beta2, cfg_.adam_eps) {
  cfg_.validate();
  g_.initialize(cfg_.seed);
  d_.initialize(cfg_.seed ^ kDiscriminatorSeedOffset);
  if (cfg_.epochs > 0) {
    if (!source_) throw ConfigError("training needs data: no sample source");
    if (cfg_.stream_probability > 0.0) source_->require(Stream::Supervised);
    if (cfg_.stream_probability < 1.0) source_->require(Stream::Unsupervised);
  }
  steps_per_epoch_ = cfg_.steps_per_epoch;
  if (steps_per_epoch_ == 0) {
    const std::size_t n = source_ ? source_->size() : 0;
    steps_per_epoch_ = std::max<int>(1, int((n + std::size_t(cfg_.batch) - 1) / std::size_t(cfg_.batch)));
  }
}

std::vector<CompositeSample> Trainer::draw_batch(std::uint64_t step) const {
  if (!source_) throw StateError("trainer has no sample source");
  auto rng = step_rng(cfg_.seed, step);
  std::bernoulli_distribution supervised(cfg_.stream_probability);
  const Stream stream = supervised(rng) ? Stream::Supervised : Stream::Unsupervised;
  return sample_stream_batch(rng, *source_, stream, cfg_.batch);
}

StepReport Trainer::step() {
  const auto batch = draw_batch(step_);
  StepReport r;
  try {
    r = train_step(g_, d_, g_opt_, d_opt_, batch, cfg_.weights(), current_lr());
  } catch (const NonFiniteLoss& e) {
    throw NonFiniteLoss("step " + std::to_string(step_) + ": " + e.what());
  }
  ++step_;
  return r;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.put_scalars("@state", {double(step_), double(std::uint32_t(cfg_.seed)), double(std::uint32_t(cfg_.seed >> 32))});
  put_predictor(c, g_);
  c.put_scalars("@discriminator/widths", as_doubles(d_.config().widths));
  c.put_parameters(d_.parameters());
  g_opt_.save(c, "G");
  d_opt_.save(c, "D");
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  const NamedArray& state = ckpt.at("@state");
  if (state.data.size() != 3) throw CheckpointError("@state has the wrong length", 0);
  const std::uint64_t seed = std::uint64_t(state.data[1]) | (std::uint64_t(state.data[2]) << 32);
  if (seed != cfg_.seed) throw ConfigError("checkpoint was trained with a different seed");
  ckpt.get_parameters(g_.parameters());
  ckpt.get_parameters(d_.parameters());
  g_opt_.load(ckpt, "G", g_.parameters());
  d_opt_.load(ckpt, "D", d_.parameters());
  step_ = std::uint64_t(state.data[0]);
}

// ---------------------------------------------------------------------------
// Training driver

std::string metrics_line(std::uint64_t step, int epoch, double lr, const StepReport& r) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["stream"] = stream_tag(r.stream);
  j["lr"] = lr;
  j["rec"] = r.rec ? nlohmann::ordered_json(*r.rec) : nlohmann::ordered_json(nullptr);
  j["gen"] = r.gen;
  j["disc"] = r.disc;
  return j.dump();
}

namespace {

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "checkpoint_%04d.harm", epoch);
  return buf;
}

void truncate_log(const fs::path& log, std::uint64_t keep_below) {
  if (!fs::exists(log)) return;
  std::ifstream in(log);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step")) break;
    if (j["step"].get<std::uint64_t>() >= keep_below) break;
    kept += line + "\n";
  }
  in.close();
  write_file(log.string(), kept);
}

}  // namespace

TrainingResult run_training(const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::shared_ptr<const SampleSource> source;
  if (cfg.epochs > 0) {
    const auto inpaint = make_inpaint_provider(cfg.inpaint_program, cfg.inpaint_cache);
    const std::string s1 = cfg.stream_probability > 0.0 ? cfg.stream1_manifest : std::string();
    const std::string s2 = cfg.stream_probability < 1.0 ? cfg.stream2_manifest : std::string();
    source = std::make_shared<const SampleSource>(
        SampleSource::from_manifests(s1, s2, cfg.resolution, *inpaint, cfg.sampler()));
  }
  Trainer trainer(cfg, source);
  TrainingResult result;
  const fs::path latest = dir / "latest.harm";
  const fs::path log = dir / "metrics.jsonl";
  if (fs::exists(latest)) {
    trainer.restore(load_checkpoint_file(latest.string()));
    truncate_log(log, trainer.step_index());
    result.resumed = true;
  } else {
    const Checkpoint initial = trainer.checkpoint();
    save_checkpoint_file(initial, (dir / checkpoint_name(0)).string());
    save_checkpoint_file(initial, latest.string());
    write_file(log.string(), "");
  }

  const std::uint64_t spe = std::uint64_t(trainer.steps_per_epoch());
  const std::uint64_t total = std::uint64_t(cfg.epochs) * spe;
  std::ofstream metrics(log, std::ios::app);
  while (trainer.step_index() < total) {
    const std::uint64_t step = trainer.step_index();
    const int epoch = trainer.epoch();
    const double lr = trainer.current_lr();
    StepReport r;
    try {
      r = trainer.step();
    } catch (const NonFiniteLoss& e) {
      write_file((dir / ("nonfinite_step_" + std::to_string(step) + ".txt")).string(), std::string(e.what()) + "\n");
      throw;
    }
    metrics << metrics_line(step, epoch, lr, r) << '\n';
    metrics.flush();
    if (trainer.step_index() % spe == 0) {
      const Checkpoint c = trainer.checkpoint();
      save_checkpoint_file(c, (dir / checkpoint_name(int(trainer.step_index() / spe))).string());
      save_checkpoint_file(c, latest.string());
    }
  }
  result.final_checkpoint = latest.string();
  result.steps = trainer.step_index();
  return result;
}

}  // namespace harmonia
