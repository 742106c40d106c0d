#include <doctest.h>

#include <harmonia/checkpoint.hpp>
#include <harmonia/error.hpp>
#include <harmonia/trainer.hpp>

#include "support.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace harmonia;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.resolution = 16;
  c.grid = 8;
  c.curve_nodes = 8;
  c.curve_widths = {4, 4, 8};
  c.shading_widths = {4, 4};
  c.disc_widths = {4, 4};
  c.batch = 2;
  c.dilation = 2;
  c.seed = 3;
  return c;
}

std::shared_ptr<const SampleSource> small_source(const TrainConfig& cfg, int n = 3) {
  std::mt19937_64 rng(77);
  std::vector<RetouchTriplet> triplets;
  std::vector<std::pair<ImageTensor, MaskTensor>> images;
  for (int i = 0; i < n; ++i) {
    triplets.push_back(harmonia::testing::synthetic_triplet(rng, cfg.resolution));
    images.emplace_back(triplets.back().original, triplets.back().mask);
  }
  auto reals = SampleSource::prepare_reals(std::move(images), NaiveInpaint(), cfg.dilation);
  return std::make_shared<const SampleSource>(std::move(triplets), std::move(reals), cfg.sampler());
}

std::vector<std::vector<double>> values(const ad::ParameterStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& p : store) out.emplace_back(p.value.begin(), p.value.end());
  return out;
}

std::vector<CompositeSample> batch_of(const SampleSource& src, Stream s, std::uint64_t seed, int n = 2) {
  std::mt19937_64 rng(seed);
  return sample_stream_batch(rng, src, s, n);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(lr_schedule(c, 0) == 4e-5);
  CHECK(lr_schedule(c, 19) == 4e-5);
  CHECK(lr_schedule(c, 20) == 8e-6);
  CHECK(lr_schedule(c, 40) == 1.6e-6);
  CHECK(lr_schedule(c, 60) == 3.2e-7);
  CHECK(lr_schedule(c, 79) == 3.2e-7);
  c.lr = 1e-3;
  c.lr_decay = 0.5;
  c.decay_interval = 3;
  CHECK(lr_schedule(c, 7) == 2.5e-4);
  CHECK_THROWS(lr_schedule(c, -1));
}

TEST_CASE("adam matches a hand computed update") {
  ad::ParameterStore store;
  auto& p = store.add("w", {1});
  p.value[0] = 1.0;
  Adam opt(0.9, 0.999, 1e-8);
  const double lr = 0.1;
  double m = 0.0, v = 0.0, theta = 1.0;
  for (int t = 1; t <= 3; ++t) {
    // Mean of two per-image gradients.
    const double g = 0.5 * (2.0 * theta + (theta - 3.0));
    store.zero_grad();
    p.grad[0] = g;
    opt.step(store, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    theta -= lr * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(p.value[0] - theta) < 1e-15);
  }
  CHECK(opt.steps() == 3);
  // First step moves every coordinate by about lr.
  CHECK(std::abs(1.0 - 0.1 * 1.5 / (1.5 + 1e-8) - (1.0 - 0.1)) < 1e-8);
}

TEST_CASE("train step updates both players once and the discriminator ignores lambda") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  const auto batch = batch_of(*src, Stream::Supervised, 5);
  std::vector<std::vector<std::vector<double>>> d_after, g_after;
  for (double lambda : {0.92, 1.0, 0.5}) {
    Predictor g(cfg.predictor());
    Discriminator d(cfg.discriminator());
    g.initialize(1);
    d.initialize(2);
    Adam go, dop;
    const auto r = train_step(g, d, go, dop, batch, {lambda}, 1e-3);
    CHECK(go.steps() == 1);
    CHECK(dop.steps() == 1);
    CHECK(r.rec.has_value());
    CHECK(std::isfinite(r.gen));
    CHECK(std::isfinite(r.disc));
    d_after.push_back(values(d.parameters()));
    g_after.push_back(values(g.parameters()));
    for (const auto& p : d.parameters()) CHECK((p.grad == 0.0).all());
  }
  CHECK(d_after[0] == d_after[1]);
  CHECK(d_after[0] == d_after[2]);
  CHECK(g_after[0] != g_after[1]);
}

TEST_CASE("lambda one gives the pure reconstruction gradient") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  const auto batch = batch_of(*src, Stream::Supervised, 6);
  const double lr = 1e-3;

  Predictor g(cfg.predictor());
  Discriminator d(cfg.discriminator());
  g.initialize(4, false);
  d.initialize(5);
  Adam go, dop;
  train_step(g, d, go, dop, batch, {1.0}, lr);

  // Reference: plain L1 backward then one Adam step.
  Predictor ref(cfg.predictor());
  ref.initialize(4, false);
  std::vector<const ImageTensor*> c, b, t;
  std::vector<const MaskTensor*> m;
  for (const auto& s : batch) {
    c.push_back(&s.composite);
    b.push_back(&s.background);
    t.push_back(&*s.target);
    m.push_back(&s.mask);
  }
  const int n = int(batch.size()), r = cfg.resolution;
  auto& tape = ref.graph().tape;
  tape.clear();
  ref.parameters().zero_grad();
  const auto cv = tape.constant({n, 3, r, r}, to_nchw(c));
  const auto mv = tape.constant({n, 1, r, r}, to_nchw(m));
  const auto pred = ref.render(ref.forward(tape, cv, tape.constant({n, 3, r, r}, to_nchw(b)), mv), cv, mv);
  tape.backward(ad::l1_loss(pred, tape.constant({n, 3, r, r}, to_nchw(t))));
  Adam ro;
  ro.step(ref.parameters(), lr);
  CHECK(values(ref.parameters()) == values(g.parameters()));
}

TEST_CASE("a constant discriminator passes no adversarial gradient") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  const auto batch = batch_of(*src, Stream::Unsupervised, 7);
  Predictor g(cfg.predictor());
  g.initialize(8, false);
  Discriminator d(cfg.discriminator());
  for (auto& p : d.parameters()) p.value.setZero();
  std::vector<const ImageTensor*> c, b;
  std::vector<const MaskTensor*> m;
  for (const auto& s : batch) {
    c.push_back(&s.composite);
    b.push_back(&s.background);
    m.push_back(&s.mask);
  }
  const int n = 2, r = cfg.resolution;
  auto& tape = g.graph().tape;
  tape.clear();
  g.parameters().zero_grad();
  const auto cv = tape.constant({n, 3, r, r}, to_nchw(c));
  const auto mv = tape.constant({n, 1, r, r}, to_nchw(m));
  const auto pred = g.render(g.forward(tape, cv, tape.constant({n, 3, r, r}, to_nchw(b)), mv), cv, mv);
  const auto scores = d.forward(tape, pred);
  CHECK((scores.value() == 0.5).all());
  const auto loss = ad::gen_loss(scores, mv);
  CHECK(std::abs(loss.item() - std::log(2.0)) < 1e-12);
  tape.backward(loss);
  for (const auto& p : g.parameters()) CHECK((p.grad == 0.0).all());
}

TEST_CASE("small steps never increase the reconstruction loss") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  const auto batch = batch_of(*src, Stream::Supervised, 9, 1);
  Predictor g(cfg.predictor());
  g.initialize(10, false);
  const auto& s = batch[0];
  const int r = cfg.resolution;
  auto loss_and_grad = [&]() {
    auto& tape = g.graph().tape;
    tape.clear();
    g.parameters().zero_grad();
    const auto cv = tape.constant({1, 3, r, r}, to_nchw({&s.composite}));
    const auto mv = tape.constant({1, 1, r, r}, to_nchw({&s.mask}));
    const auto pred = g.render(g.forward(tape, cv, tape.constant({1, 3, r, r}, to_nchw({&s.background})), mv), cv, mv);
    const auto loss = ad::l1_loss(pred, tape.constant({1, 3, r, r}, to_nchw({&*s.target})));
    const double v = loss.item();
    tape.backward(loss);
    return v;
  };
  double prev = loss_and_grad();
  const double first = prev;
  for (int i = 0; i < 100; ++i) {
    for (auto& p : g.parameters()) p.value -= 1e-6 * p.grad;
    const double cur = loss_and_grad();
    CHECK(cur <= prev + 1e-9);
    prev = cur;
  }
  CHECK(prev < first);
}

TEST_CASE("train step rejects bad batches") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  Predictor g(cfg.predictor());
  Discriminator d(cfg.discriminator());
  g.initialize(1);
  d.initialize(2);
  Adam go, dop;
  CHECK_THROWS_AS(train_step(g, d, go, dop, {}, {}, 1e-3), std::invalid_argument);
  auto mixed = batch_of(*src, Stream::Supervised, 1, 1);
  mixed.push_back(batch_of(*src, Stream::Unsupervised, 2, 1)[0]);
  CHECK_THROWS_AS(train_step(g, d, go, dop, mixed, {}, 1e-3), std::invalid_argument);
  CHECK(go.steps() == 0);
}

TEST_CASE("non-finite losses raise with a dump") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  Trainer t(cfg, src);
  for (auto& p : t.discriminator().parameters()) p.value.setConstant(std::nan(""));
  try {
    t.step();
    FAIL("accepted a NaN loss");
  } catch (const NonFiniteLoss& e) {
    CHECK(std::string(e.what()).find("loss") != std::string::npos);
  }
}

TEST_CASE("trainer batches are stream homogeneous and reproducible") {
  auto cfg = small_config();
  cfg.batch = 3;
  const auto src = small_source(cfg);
  Trainer t(cfg, src);
  int supervised = 0;
  const int steps = 400;
  for (std::uint64_t s = 0; s < steps; ++s) {
    const auto b = t.draw_batch(s);
    REQUIRE(b.size() == 3);
    for (const auto& x : b) CHECK(x.stream == b[0].stream);
    supervised += b[0].stream == Stream::Supervised;
  }
  const double sigma = std::sqrt(steps * 0.25);
  CHECK(std::abs(supervised - steps / 2.0) < 3.0 * sigma);
  const auto a = t.draw_batch(17), b = t.draw_batch(17);
  CHECK(a[0].composite == b[0].composite);
  CHECK(a[2].mask == b[2].mask);

  cfg.stream_probability = 1.0;
  Trainer only1(cfg, src);
  for (std::uint64_t s = 0; s < 50; ++s) CHECK(only1.draw_batch(s)[0].stream == Stream::Supervised);
}

TEST_CASE("same seed gives bit identical training") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  Trainer a(cfg, src), b(cfg, src);
  for (int i = 0; i < 3; ++i) {
    const auto ra = a.step(), rb = b.step();
    CHECK(ra.objective == rb.objective);
    CHECK(ra.disc == rb.disc);
  }
  CHECK(encode_checkpoint(a.checkpoint()) == encode_checkpoint(b.checkpoint()));

  auto other = cfg;
  other.seed = 4;
  Trainer c(other, src);
  for (int i = 0; i < 3; ++i) c.step();
  CHECK(encode_checkpoint(c.checkpoint()) != encode_checkpoint(a.checkpoint()));
}

TEST_CASE("checkpoint restore continues the same trajectory") {
  const auto cfg = small_config();
  const auto src = small_source(cfg);
  Trainer a(cfg, src);
  for (int i = 0; i < 2; ++i) a.step();
  Trainer b(cfg, src);
  b.restore(decode_checkpoint(encode_checkpoint(a.checkpoint())));
  CHECK(b.step_index() == 2);
  for (int i = 0; i < 2; ++i) CHECK(a.step().objective == b.step().objective);
  CHECK(encode_checkpoint(a.checkpoint()) == encode_checkpoint(b.checkpoint()));

  auto other = cfg;
  other.seed = 11;
  Trainer c(other, src);
  CHECK_THROWS_AS(c.restore(a.checkpoint()), ConfigError);
}

TEST_CASE("trainer needs data for the streams it samples") {
  auto cfg = small_config();
  CHECK_THROWS_AS(Trainer(cfg, nullptr), ConfigError);
  cfg.epochs = 0;
  CHECK_NOTHROW(Trainer(cfg, nullptr));
  cfg.epochs = 1;
  const auto src = std::make_shared<const SampleSource>(std::vector<RetouchTriplet>{},
                                                        small_source(cfg)->reals(), cfg.sampler());
  CHECK_THROWS_AS(Trainer(cfg, src), ConfigError);
  cfg.stream_probability = 0.0;
  CHECK_NOTHROW(Trainer(cfg, src));
}

namespace {

TrainConfig run_config(const harmonia::testing::DatasetFiles& files, int epochs) {
  auto c = small_config();
  c.epochs = epochs;
  c.stream1_manifest = files.stream1;
  c.stream2_manifest = files.stream2;
  return c;
}

std::vector<nlohmann::json> log_lines(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("interrupted training resumes to the same result") {
  const auto dir = harmonia::testing::scratch_dir("trainer_resume");
  const auto files = harmonia::testing::write_dataset(dir / "data", 3, 20);

  const auto full = run_training(run_config(files, 2), (dir / "full").string());
  CHECK_FALSE(full.resumed);
  // 3 triplets give 6 composites plus 3 reals; batch 2 gives 5 steps.
  CHECK(full.steps == 10);
  for (const char* name : {"checkpoint_0000.harm", "checkpoint_0001.harm", "checkpoint_0002.harm", "latest.harm"})
    CHECK(fs::exists(dir / "full" / name));

  run_training(run_config(files, 1), (dir / "split").string());
  {
    std::ofstream junk(dir / "split" / "metrics.jsonl", std::ios::app);
    junk << "{\"step\":7,\"stale\":true}\n";
  }
  const auto second = run_training(run_config(files, 2), (dir / "split").string());
  CHECK(second.resumed);
  CHECK(second.steps == 10);
  CHECK(slurp(dir / "full" / "metrics.jsonl") == slurp(dir / "split" / "metrics.jsonl"));
  CHECK(slurp(dir / "full" / "latest.harm") == slurp(dir / "split" / "latest.harm"));
  CHECK(slurp(dir / "full" / "checkpoint_0001.harm") == slurp(dir / "split" / "checkpoint_0001.harm"));

  const auto lines = log_lines(dir / "full" / "metrics.jsonl");
  REQUIRE(lines.size() == 10);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i]["step"] == i);
    CHECK(lines[i]["epoch"] == int(i / 5));
    CHECK(lines[i]["rec"].is_null() == (lines[i]["stream"] == "s2"));
  }
}

TEST_CASE("single stream runs log only that stream") {
  const auto dir = harmonia::testing::scratch_dir("trainer_streams");
  const auto files = harmonia::testing::write_dataset(dir / "data", 2, 20);
  auto cfg = run_config(files, 1);
  cfg.stream_probability = 1.0;
  cfg.stream2_manifest.clear();
  run_training(cfg, (dir / "s1").string());
  for (const auto& l : log_lines(dir / "s1" / "metrics.jsonl")) CHECK(l["stream"] == "s1");

  cfg = run_config(files, 1);
  cfg.stream_probability = 0.0;
  cfg.stream1_manifest.clear();
  run_training(cfg, (dir / "s2").string());
  const auto lines = log_lines(dir / "s2" / "metrics.jsonl");
  CHECK_FALSE(lines.empty());
  for (const auto& l : lines) {
    CHECK(l["stream"] == "s2");
    CHECK(l["rec"].is_null());
  }
}

TEST_CASE("zero epochs writes only the initial checkpoint") {
  const auto dir = harmonia::testing::scratch_dir("trainer_zero");
  auto cfg = small_config();
  cfg.epochs = 0;
  const auto r = run_training(cfg, dir.string());
  CHECK(r.steps == 0);
  CHECK(fs::exists(dir / "checkpoint_0000.harm"));
  CHECK(fs::exists(dir / "latest.harm"));
  CHECK_FALSE(fs::exists(dir / "checkpoint_0001.harm"));
  CHECK(slurp(dir / "metrics.jsonl").empty());
  const auto g = load_predictor_file((dir / "latest.harm").string());
  CHECK(g.config().resolution == 16);
  CHECK(g.config().grid == 8);
}

TEST_CASE("a non-finite step leaves a diagnostic file") {
  const auto dir = harmonia::testing::scratch_dir("trainer_nan");
  const auto files = harmonia::testing::write_dataset(dir / "data", 2, 20);
  const auto cfg = run_config(files, 1);
  Trainer t(cfg, small_source(cfg, 2));
  for (auto& p : t.discriminator().parameters()) p.value.setConstant(std::nan(""));
  fs::create_directories(dir / "run");
  save_checkpoint_file(t.checkpoint(), (dir / "run" / "latest.harm").string());
  CHECK_THROWS_AS(run_training(cfg, (dir / "run").string()), NonFiniteLoss);
  CHECK(fs::exists(dir / "run" / "nonfinite_step_0.txt"));
}

TEST_CASE("train config parsing") {
  const auto cfg = parse_train_config(R"(
# small run
epochs = 3
batch = 4
lr = 1e-4
lambda = 0.9
seed = 12
stream1_manifest = "data/s1.jsonl"
stream2_manifest = "/abs/s2.jsonl"
augment_brightness = false
curve_widths = [4, 8]
)", "/base");
  CHECK(cfg.epochs == 3);
  CHECK(cfg.batch == 4);
  CHECK(cfg.lr == 1e-4);
  CHECK(cfg.lambda == 0.9);
  CHECK(cfg.seed == 12);
  CHECK(fs::path(cfg.stream1_manifest) == fs::path("/base/data/s1.jsonl"));
  CHECK(cfg.stream2_manifest == "/abs/s2.jsonl");
  CHECK_FALSE(cfg.augment_brightness);
  CHECK(cfg.curve_widths == std::vector<int>{4, 8});
  CHECK(cfg.lr_decay == 0.2);

  CHECK_THROWS_AS(parse_train_config("epoch = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("epochs = \"three\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("lambda = 1.5\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_train_config("batch = 0\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_train_config("seed = -1\n"), ConfigError);

  const auto dir = harmonia::testing::scratch_dir("trainer_config");
  {
    std::ofstream f(dir / "train.toml");
    f << "stream2_manifest = \"s2.jsonl\"\nbogus = 1\n";
  }
  try {
    load_train_config((dir / "train.toml").string());
    FAIL("accepted an unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
  CHECK_THROWS_AS(load_train_config((dir / "missing.toml").string()), std::exception);
}

TEST_CASE("metrics line layout") {
  StepReport r;
  r.stream = Stream::Unsupervised;
  r.gen = 0.5;
  r.disc = 1.25;
  const auto j = nlohmann::json::parse(metrics_line(4, 1, 1e-5, r));
  CHECK(j["step"] == 4);
  CHECK(j["epoch"] == 1);
  CHECK(j["stream"] == "s2");
  CHECK(j["rec"].is_null());
  CHECK(j["gen"] == 0.5);
  CHECK(j["disc"] == 1.25);
}
