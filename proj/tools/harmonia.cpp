// harmonia: command-line front end. Exit codes: 0 success, 1 usage, 2 runtime.

#include <harmonia/data_streams.hpp>
#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>
#include <harmonia/manifest.hpp>
#include <harmonia/metrics.hpp>
#include <harmonia/params_json.hpp>
#include <harmonia/service.hpp>
#include <harmonia/trainer.hpp>

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <pthread.h>
#include <random>
#include <thread>

namespace fs = std::filesystem;
using namespace harmonia;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

int fail(const std::string& what) {
  std::string line = what;
  for (char& c : line) {
    if (c == '\n') c = ' ';
  }
  std::cerr << "harmonia: error: " << line << '\n';
  return kRuntime;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

struct HarmonizeArgs {
  std::string composite, mask, background, checkpoint, out, params_out;
};

int run_harmonize(const HarmonizeArgs& a) {
  const DecodedImage composite = load_image_with_depth(a.composite);
  if (composite.image.channels() != 3) throw IoError(a.composite, "composite must be RGB");
  const MaskTensor mask = load_mask(a.mask);
  detail::require_same_size(composite.image, mask, "harmonize", "mask");
  Predictor g = load_predictor_file(a.checkpoint);
  const int r = g.config().resolution;
  ImageTensor background;
  if (!a.background.empty()) {
    background = load_image(a.background);
    detail::require_same_size(composite.image, background, "harmonize", "background");
  } else {
    background = fallback_background(resize_bilinear(composite.image, r, r), resize_bilinear(mask, r, r));
  }
  const HarmonizationParams params = g.predict(composite.image, background, mask);
  save_image(harmonize_full(composite.image, mask, params), a.out, composite.bit_depth);
  if (!a.params_out.empty()) write_file(a.params_out, serialize_params(params) + "\n");
  return 0;
}

struct GenDataArgs {
  std::string manifest, out_dir, inpaint_program;
  int dilate = kDefaultDilation;
  std::uint64_t seed = 0;
};

/// Manifest records name files relative to the manifest itself.
std::string sample_name(const std::string& id, const char* kind) { return id + "_" + kind + ".png"; }

int run_gen_stream1(const GenDataArgs& a) {
  const DatasetManifest in = load_manifest(a.manifest, kStream1Keys);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  DatasetManifest out;
  for (const auto& e : in.entries) {
    RetouchTriplet t{load_image(e.at("image")), load_image(e.at("retouched")), load_mask(e.at("mask"))};
    try {
      t.validate();
    } catch (const std::invalid_argument& err) {
      throw ParseError(e.id, err.what());
    }
    auto [fg_edit, bg_edit] = stream1_samples(t);
    const std::pair<const char*, const CompositeSample*> samples[] = {{"fg", &fg_edit}, {"bg", &bg_edit}};
    for (const auto& [tag, s] : samples) {
      ManifestEntry rec;
      rec.id = e.id + "_" + tag;
      rec.fields["composite"] = sample_name(rec.id, "composite");
      rec.fields["background"] = sample_name(rec.id, "background");
      rec.fields["mask"] = sample_name(rec.id, "mask");
      rec.fields["target"] = sample_name(rec.id, "target");
      rec.fields["stream"] = "s1";
      save_image(s->composite, (dir / rec.fields["composite"]).string(), 16);
      save_image(s->background, (dir / rec.fields["background"]).string(), 16);
      save_mask(s->mask, (dir / rec.fields["mask"]).string(), 16);
      save_image(*s->target, (dir / rec.fields["target"]).string(), 16);
      out.entries.push_back(std::move(rec));
    }
  }
  save_manifest(out, (dir / "manifest.jsonl").string());
  std::cout << out.size() << " composites from " << in.size() << " triplets\n";
  return 0;
}

int run_gen_stream2(const GenDataArgs& a) {
  const DatasetManifest in = load_manifest(a.manifest, kStream2Keys);
  if (in.size() < 2) throw ConfigError("stream2 needs at least 2 images (pairs need i != j), got " + std::to_string(in.size()));
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const auto inpaint = make_inpaint_provider(a.inpaint_program, env_or("HARMONIA_CACHE", (dir / "inpaint_cache").string()));

  std::vector<ImageTensor> images;
  std::vector<MaskTensor> masks;
  for (const auto& e : in.entries) {
    images.push_back(load_image(e.at("image")));
    masks.push_back(load_mask(e.at("mask")));
    if (images.back().channels() != 3) throw ParseError(e.id, "image must be RGB");
    try {
      detail::require_same_size(images.back(), masks.back(), "stream2", "mask");
    } catch (const std::invalid_argument& err) {
      throw ParseError(e.id, err.what());
    }
  }
  std::vector<ImageTensor> backgrounds;
  for (std::size_t i = 0; i < images.size(); ++i) {
    backgrounds.push_back(inpainted_background(images[i], masks[i], *inpaint, a.dilate));
  }

  std::seed_seq seq{std::uint32_t(a.seed), std::uint32_t(a.seed >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> other(0, images.size() - 2);
  DatasetManifest out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::size_t j = other(rng);
    if (j >= i) ++j;
    const int h = images[i].height(), w = images[i].width();
    const ImageTensor fg = resize_bilinear(images[j], h, w);
    const MaskTensor fg_mask = resize_bilinear(masks[j], h, w);
    ManifestEntry rec;
    rec.id = in.entries[i].id + "_" + in.entries[j].id;
    rec.fields["composite"] = sample_name(rec.id, "composite");
    rec.fields["background"] = sample_name(rec.id, "background");
    rec.fields["mask"] = sample_name(rec.id, "mask");
    rec.fields["real"] = sample_name(rec.id, "real");
    rec.fields["stream"] = "s2";
    save_image(composite(fg, backgrounds[i], fg_mask), (dir / rec.fields["composite"]).string(), 16);
    save_image(backgrounds[i], (dir / rec.fields["background"]).string(), 16);
    save_mask(fg_mask, (dir / rec.fields["mask"]).string(), 16);
    save_image(composite(images[i], backgrounds[i], masks[i]), (dir / rec.fields["real"]).string(), 16);
    out.entries.push_back(std::move(rec));
  }
  save_manifest(out, (dir / "manifest.jsonl").string());
  std::cout << out.size() << " composites from " << in.size() << " images\n";
  return 0;
}

int run_train(const std::string& config, const std::string& out_dir) {
  TrainConfig cfg = load_train_config(config);
  if (const char* cache = std::getenv("HARMONIA_CACHE"); cache && *cache) cfg.inpaint_cache = cache;
  const TrainingResult r = run_training(cfg, out_dir);
  std::cout << (r.resumed ? "resumed, " : "") << r.steps << " steps, checkpoint " << r.final_checkpoint << '\n';
  return 0;
}

int run_bt_rank(const std::string& csv) {
  const BTResult r = bt_fit(load_comparisons(csv));
  std::vector<std::size_t> order(r.methods.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r.scores[a] > r.scores[b]; });
  std::string joined;
  for (std::size_t k = 0; k < order.size(); ++k) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", r.scores[order[k]]);
    std::cout << k + 1 << '\t' << r.methods[order[k]] << '\t' << buf << '\n';
    joined += (k ? ", " : "") + std::string(buf);
  }
  std::cout << "scores: " << joined << '\n';
  if (!r.converged) std::cerr << "harmonia: warning: B-T iteration cap reached before tolerance\n";
  return 0;
}

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  ServiceConfig service;
};

int run_serve(const ServeArgs& a) {
  HarmonizationService service(a.service);
  HttpServer server(service);
  if (!server.bind(a.host, a.port)) return fail("cannot bind " + a.host + ":" + std::to_string(a.port) + " (port in use?)");

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  std::thread worker([&server] { server.listen(); });
  std::cout << "listening on " << a.host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  worker.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric image harmonization engine"};
  app.require_subcommand(1);

  HarmonizeArgs harm;
  auto* harmonize = app.add_subcommand("harmonize", "Predict parameters for a composite and apply them at full resolution");
  harmonize->add_option("--composite", harm.composite, "Composite PNG")->required();
  harmonize->add_option("--mask", harm.mask, "Foreground mask PNG")->required();
  harmonize->add_option("--background", harm.background, "Background PNG (default: diffused from the composite)");
  harmonize->add_option("--checkpoint", harm.checkpoint, "Predictor checkpoint")->required();
  harmonize->add_option("--out", harm.out, "Output PNG")->required();
  harmonize->add_option("--params-out", harm.params_out, "Write the predicted params JSON here");

  GenDataArgs gen;
  auto* gen_data = app.add_subcommand("gen-data", "Build training composites from a manifest");
  gen_data->require_subcommand(1);
  auto add_gen_flags = [&gen](CLI::App* sub) {
    sub->add_option("--manifest", gen.manifest, "Input manifest (JSON lines)")->required();
    sub->add_option("--out-dir", gen.out_dir, "Output directory")->required();
    sub->add_option("--dilate", gen.dilate, "Mask dilation radius in pixels")->capture_default_str();
    sub->add_option("--seed", gen.seed, "Pairing seed")->capture_default_str();
    sub->add_option("--inpaint-program", gen.inpaint_program, "External inpainter: PROG in.png mask.png out.png");
  };
  auto* stream1 = gen_data->add_subcommand("stream1", "Two composites per before/after triplet");
  auto* stream2 = gen_data->add_subcommand("stream2", "Foreground j over inpainted background i");
  add_gen_flags(stream1);
  add_gen_flags(stream2);

  std::string train_config, train_out;
  auto* train = app.add_subcommand("train", "Run dual-stream training");
  train->add_option("--config", train_config, "TOML training config")->required();
  train->add_option("--out-dir", train_out, "Checkpoint and metrics directory")->required();

  std::string pred_manifest, gt_manifest;
  int resolution = 256;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  eval->add_option("--pred-manifest", pred_manifest, "Prediction manifest (id, image)")->required();
  eval->add_option("--gt-manifest", gt_manifest, "Ground-truth manifest (id, image)")->required();
  eval->add_option("--resolution", resolution, "Evaluation resolution")->capture_default_str();

  std::string csv;
  auto* bt = app.add_subcommand("bt-rank", "Bradley-Terry ranking of pairwise preferences");
  bt->add_option("--csv", csv, "CSV with header method_a,method_b,winner")->required();

  ServeArgs serve_args;
  serve_args.port = std::atoi(env_or("HARMONIA_PORT", "8080").c_str());
  auto* serve = app.add_subcommand("serve", "Start the HTTP service");
  serve->add_option("--port", serve_args.port, "Port (env HARMONIA_PORT)")->capture_default_str();
  serve->add_option("--host", serve_args.host, "Bind address")->capture_default_str();
  serve->add_option("--checkpoint", serve_args.service.checkpoint, "Predictor checkpoint");
  serve->add_option("--session-ttl-secs", serve_args.service.session_ttl_secs, "Idle session lifetime")->capture_default_str();
  serve->add_option("--max-upload-mb", serve_args.service.max_upload_mb, "Request size limit")->capture_default_str();
  serve->add_option("--cors-origin", serve_args.service.cors_origin, "Allowed UI origin")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*harmonize) return run_harmonize(harm);
    if (*stream1) return run_gen_stream1(gen);
    if (*stream2) return run_gen_stream2(gen);
    if (*train) return run_train(train_config, train_out);
    if (*eval) {
      std::cout << run_benchmark(pred_manifest, gt_manifest, resolution).to_json() << '\n';
      return 0;
    }
    if (*bt) return run_bt_rank(csv);
    if (*serve) return run_serve(serve_args);
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  return kUsage;
}
