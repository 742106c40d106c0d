#include <doctest.h>

#include <harmonia/data_streams.hpp>
#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>

#include "support.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>

using namespace harmonia;
using harmonia::testing::IdentityInpaint;
using harmonia::testing::random_image;
using harmonia::testing::random_mask;

namespace fs = std::filesystem;

namespace {

/// Fills masked pixels with a constant and counts calls.
class ConstantInpaint final : public InpaintProvider {
 public:
  ImageTensor inpaint(const ImageTensor& img, const MaskTensor& mask) const override {
    ++calls;
    ImageTensor out = img;
    for (Eigen::Index p = 0; p < img.pixels(); ++p)
      if (mask.data()[p] > 0.0f)
        for (int c = 0; c < img.channels(); ++c) out.data()[p * img.channels() + c] = 0.123456789f;
    return out;
  }
  mutable std::atomic<int> calls{0};
};

MaskTensor checker(int h, int w) {
  MaskTensor m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m(y, x) = float((x + y) % 2);
  return m;
}

void check_outside_untouched(const ImageTensor& img, const MaskTensor& m, const ImageTensor& out) {
  for (Eigen::Index p = 0; p < img.pixels(); ++p)
    if (m.data()[p] == 0.0f)
      for (int c = 0; c < img.channels(); ++c) REQUIRE(out.data()[p * img.channels() + c] == img.data()[p * img.channels() + c]);
}

fs::path write_script(const fs::path& dir, const std::string& name, const std::string& body) {
  const auto path = dir / name;
  std::ofstream(path) << "#!/bin/sh\n" << body << "\n";
  fs::permissions(path, fs::perms::owner_all);
  return path;
}

}  // namespace

TEST_CASE("each triplet yields two composites") {
  std::mt19937_64 rng(1);
  const auto t = harmonia::testing::synthetic_triplet(rng, 16);
  const auto [a, b] = stream1_samples(t);
  CHECK(a.composite == composite(t.retouched, t.original, t.mask));
  CHECK(*a.target == t.original);
  CHECK(b.composite == composite(t.original, t.retouched, t.mask));
  CHECK(*b.target == t.retouched);
  for (const auto* s : {&a, &b}) {
    CHECK(s->stream == Stream::Supervised);
    CHECK(s->mask == t.mask);
    CHECK(*s->real == *s->target);
  }
}

TEST_CASE("stream 1 degenerate triplets") {
  std::mt19937_64 rng(2);
  RetouchTriplet same{random_image(rng, 8, 8), {}, random_mask(rng, 8, 8)};
  same.retouched = same.original;
  const auto [a, b] = stream1_samples(same);
  CHECK(a.composite == same.original);
  CHECK(b.composite == same.original);
  CHECK(*a.target == same.original);
  CHECK(*b.target == same.original);

  RetouchTriplet full{random_image(rng, 8, 8), random_image(rng, 8, 8), MaskTensor(8, 8, 1.0f)};
  const auto [fa, fb] = stream1_samples(full);
  CHECK(fa.composite == full.retouched);
  CHECK(*fa.target == full.original);
}

TEST_CASE("stream 1 checker composite") {
  RetouchTriplet t{ImageTensor(4, 5, 3, 0.2f), ImageTensor(4, 5, 3, 0.8f), checker(4, 5)};
  const auto [a, b] = stream1_samples(t);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      const bool fg = (x + y) % 2 == 1;
      CHECK(a.composite(y, x, 0) == (fg ? 0.8f : 0.2f));
      CHECK(b.composite(y, x, 2) == (fg ? 0.2f : 0.8f));
    }
}

TEST_CASE("triplet validation") {
  RetouchTriplet t{ImageTensor(4, 4, 3), ImageTensor(4, 5, 3), MaskTensor(4, 4)};
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("diffusion fill") {
  std::mt19937_64 rng(3);
  const auto img = random_image(rng, 9, 11);
  CHECK(naive_inpaint(img, MaskTensor(9, 11)) == img);

  const ImageTensor flat(9, 11, 3, 0.37f);
  auto soft = random_mask(rng, 9, 11);
  soft(4, 4) = 0.0f;
  CHECK((naive_inpaint(flat, soft).data() - 0.37f).abs().maxCoeff() < 1e-6f);

  ImageTensor small(3, 3, 1);
  const float border[8] = {0.1f, 0.9f, 0.3f, 0.7f, 0.5f, 0.2f, 0.6f, 0.4f};
  int k = 0;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x)
      if (y != 1 || x != 1) small(y, x, 0) = border[k++];
  MaskTensor centre(3, 3);
  centre(1, 1) = 1.0f;
  const double want = (double(small(0, 1, 0)) + small(2, 1, 0) + small(1, 0, 0) + small(1, 2, 0)) / 4.0;
  CHECK(naive_inpaint(small, centre)(1, 1, 0) == doctest::Approx(want).epsilon(1e-6));

  CHECK_THROWS_AS(naive_inpaint(img, MaskTensor(9, 11, 1.0f)), std::invalid_argument);
}

TEST_CASE("inpaint providers leave unmasked pixels bit-identical") {
  std::mt19937_64 rng(4);
  const auto dir = harmonia::testing::scratch_dir("providers");
  const auto copy = write_script(dir, "copy.sh", "cp \"$1\" \"$3\"");
  auto inner = std::make_shared<ConstantInpaint>();
  const CachedInpaint cached(inner, (dir / "cache").string());
  const SubprocessInpaint external(copy.string());
  const NaiveInpaint naive;
  for (int i = 0; i < 5; ++i) {
    const auto img = random_image(rng, 12, 10);
    auto m = harmonia::testing::binary_mask(rng, 12, 10);
    m(0, 0) = 0.0f;
    auto soft = random_mask(rng, 12, 10);
    for (Eigen::Index p = 0; p < soft.pixels(); p += 3) soft.data()[p] = 0.0f;
    check_outside_untouched(img, m, naive.inpaint(img, m));
    check_outside_untouched(img, m, cached.inpaint(img, m));
    check_outside_untouched(img, m, external.inpaint(img, m));
    check_outside_untouched(img, soft, naive.inpaint(img, soft));
  }
}

TEST_CASE("external inpainter failures surface as I/O errors") {
  const auto dir = harmonia::testing::scratch_dir("providers_fail");
  const auto fail = write_script(dir, "fail.sh", "exit 3");
  std::mt19937_64 rng(5);
  const auto img = random_image(rng, 6, 6);
  CHECK_THROWS_AS(SubprocessInpaint(fail.string()).inpaint(img, random_mask(rng, 6, 6)), IoError);
  CHECK_THROWS_AS(SubprocessInpaint((dir / "missing").string()).inpaint(img, random_mask(rng, 6, 6)), IoError);
}

TEST_CASE("inpaint cache hits return identical pixels") {
  std::mt19937_64 rng(6);
  const auto dir = harmonia::testing::scratch_dir("cache");
  auto inner = std::make_shared<ConstantInpaint>();
  const CachedInpaint cached(inner, dir.string());
  const auto img = random_image(rng, 10, 10);
  const auto m = random_mask(rng, 10, 10);
  const auto first = cached.inpaint(img, m);
  CHECK(inner->calls == 1);
  CHECK(fs::exists(cached.cache_path(img, m)));
  const auto second = cached.inpaint(img, m);
  CHECK(inner->calls == 1);
  CHECK(first == second);
  // A fresh cache object over the same directory sees the same file.
  const CachedInpaint again(inner, dir.string());
  CHECK(again.inpaint(img, m) == first);
  CHECK(inner->calls == 1);

  auto other = img;
  other(0, 0, 0) = 1.0f - other(0, 0, 0);
  CHECK(cached.cache_path(other, m) != cached.cache_path(img, m));
  CHECK(content_hash(img, m).size() == 64);
}

TEST_CASE("stream 2 composites") {
  std::mt19937_64 rng(7);
  const IdentityInpaint identity;
  const auto img = random_image(rng, 16, 16);
  const auto m = harmonia::testing::ellipse_mask(rng, 16, 16);
  const auto same = stream2_composite(img, m, img, m, identity, 3);
  CHECK(same.composite == img);
  CHECK(same.stream == Stream::Unsupervised);
  CHECK_FALSE(same.target.has_value());
  CHECK(make_real_sample(img, m, identity, 3) == img);
  CHECK(make_real_sample(img, m, NaiveInpaint(), 3) == stream2_composite(img, m, img, m, NaiveInpaint(), 3).composite);

  const auto other = random_image(rng, 16, 16);
  const auto empty_fg = stream2_composite(other, MaskTensor(16, 16), img, m, NaiveInpaint(), 3);
  CHECK(empty_fg.composite == inpainted_background(img, m, NaiveInpaint(), 3));

  const ImageTensor flat(16, 16, 3, 0.6f);
  CHECK((make_real_sample(flat, m, NaiveInpaint(), 3).data() - 0.6f).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("stream 2 blend with disjoint constant regions") {
  // Image i: left half 0.2 (its foreground), right half 0.9. Image j: 0.5.
  ImageTensor bg(4, 8, 3, 0.9f), fg(4, 8, 3, 0.5f);
  MaskTensor mi(4, 8), mj(4, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) {
      if (x < 4) {
        for (int c = 0; c < 3; ++c) bg(y, x, c) = 0.2f;
        mi(y, x) = 1.0f;
      }
      if (x >= 6) mj(y, x) = 0.5f;
    }
  const auto s = stream2_composite(fg, mj, bg, mi, IdentityInpaint(), 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) {
      const double b = x < 4 ? 0.2 : 0.9;
      const double want = x >= 6 ? 0.5 * 0.5 + 0.5 * b : b;
      CHECK(s.composite(y, x, 1) == doctest::Approx(want).epsilon(1e-7));
    }
}

TEST_CASE("fallback background") {
  std::mt19937_64 rng(8);
  const auto c = random_image(rng, 8, 8);
  auto m = harmonia::testing::binary_mask(rng, 8, 8);
  m(0, 0) = 0.0f;
  check_outside_untouched(c, m, fallback_background(c, m));
  const auto all = fallback_background(c, MaskTensor(8, 8, 1.0f));
  CHECK((all.data() == 0.0f).all());
}

namespace {

SampleSource small_source(std::mt19937_64& rng, SamplerConfig cfg = {}) {
  std::vector<RetouchTriplet> ts;
  for (int i = 0; i < 3; ++i) ts.push_back(harmonia::testing::synthetic_triplet(rng, 16));
  std::vector<std::pair<ImageTensor, MaskTensor>> imgs;
  for (int i = 0; i < 3; ++i)
    imgs.emplace_back(harmonia::testing::smooth_image(rng, 16, 16), harmonia::testing::ellipse_mask(rng, 16, 16));
  cfg.dilation = 2;
  return SampleSource(std::move(ts), SampleSource::prepare_reals(std::move(imgs), NaiveInpaint(), 2), cfg);
}

}  // namespace

TEST_CASE("stream selection probability") {
  std::mt19937_64 rng(9);
  const auto src = small_source(rng);
  std::mt19937_64 draw(10);
  for (const auto& s : sample_batch(draw, src, 200, 1.0)) CHECK(s.stream == Stream::Supervised);
  for (const auto& s : sample_batch(draw, src, 200, 0.0)) CHECK(s.stream == Stream::Unsupervised);
  int supervised = 0;
  for (const auto& s : sample_batch(draw, src, 10000, 0.5)) supervised += s.stream == Stream::Supervised;
  CHECK(supervised / 10000.0 >= 0.48);
  CHECK(supervised / 10000.0 <= 0.52);
}

TEST_CASE("unsupervised draws pair distinct images") {
  std::mt19937_64 rng(11);
  const auto src = small_source(rng);
  std::mt19937_64 draw(12);
  for (int i = 0; i < 50; ++i) {
    const auto s = src.draw_unsupervised(draw);
    bool self = false;
    for (const auto& r : src.reals()) self |= (s.mask == r.mask && s.background == r.inpainted);
    CHECK_FALSE(self);
    REQUIRE(s.real.has_value());
  }
}

TEST_CASE("supervised draws and brightness augmentation") {
  std::mt19937_64 rng(13);
  SamplerConfig off;
  off.augment_brightness = false;
  const auto plain = small_source(rng, off);
  std::mt19937_64 draw(14);
  for (int i = 0; i < 20; ++i) {
    const auto s = plain.draw_supervised(draw);
    bool found = false;
    for (const auto& t : plain.triplets()) {
      const auto [a, b] = stream1_samples(t);
      found |= (s.composite == a.composite && *s.target == *a.target) || (s.composite == b.composite && *s.target == *b.target);
    }
    CHECK(found);
  }
  // Augmentation rescales the foreground only.
  std::mt19937_64 rng2(13);
  const auto aug = small_source(rng2);
  std::mt19937_64 d1(15);
  int changed = 0;
  for (int i = 0; i < 20; ++i) {
    const auto s = aug.draw_supervised(d1);
    for (const auto& t : aug.triplets()) {
      const auto [a, b] = stream1_samples(t);
      for (const auto* base : {&a, &b}) {
        if (*base->target != *s.target) continue;
        check_outside_untouched(base->composite, s.mask, s.composite);
        changed += !(base->composite == s.composite);
      }
    }
  }
  CHECK(changed > 0);
}

TEST_CASE("sampling is deterministic for a seed") {
  std::mt19937_64 r1(16), r2(16);
  const auto s1 = small_source(r1), s2 = small_source(r2);
  std::mt19937_64 d1(17), d2(17);
  const auto b1 = sample_batch(d1, s1, 30), b2 = sample_batch(d2, s2, 30);
  for (std::size_t i = 0; i < b1.size(); ++i) {
    CHECK(b1[i].composite == b2[i].composite);
    CHECK(b1[i].stream == b2[i].stream);
  }
  std::mt19937_64 d3(18);
  for (auto stream : {Stream::Supervised, Stream::Unsupervised})
    for (const auto& s : sample_stream_batch(d3, s1, stream, 5)) CHECK(s.stream == stream);
}

TEST_CASE("sources report missing streams") {
  SampleSource none({}, {});
  CHECK_THROWS_AS(none.require(Stream::Supervised), ConfigError);
  CHECK_THROWS_AS(none.require(Stream::Unsupervised), ConfigError);
  std::mt19937_64 rng(19);
  std::vector<std::pair<ImageTensor, MaskTensor>> one;
  one.emplace_back(random_image(rng, 8, 8), harmonia::testing::ellipse_mask(rng, 8, 8));
  SampleSource single({}, SampleSource::prepare_reals(one, NaiveInpaint(), 1));
  CHECK_THROWS_AS(single.require(Stream::Unsupervised), ConfigError);
  SamplerConfig bad;
  bad.brightness_min = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sources load from manifests") {
  std::mt19937_64 rng(20);
  const auto dir = harmonia::testing::scratch_dir("source_manifest");
  std::ofstream s1(dir / "s1.jsonl"), s2(dir / "s2.jsonl");
  for (int i = 0; i < 2; ++i) {
    const auto t = harmonia::testing::synthetic_triplet(rng, 24);
    const std::string id = "t" + std::to_string(i);
    save_image(t.original, (dir / (id + "_o.png")).string());
    save_image(t.retouched, (dir / (id + "_r.png")).string());
    save_mask(t.mask, (dir / (id + "_m.png")).string());
    s1 << R"({"id":")" << id << R"(","image":")" << id << R"(_o.png","retouched":")" << id << R"(_r.png","mask":")" << id
       << R"(_m.png"})" << "\n";
    s2 << R"({"id":")" << id << R"(","image":")" << id << R"(_o.png","mask":")" << id << R"(_m.png"})" << "\n";
  }
  s1.close();
  s2.close();
  SamplerConfig cfg;
  cfg.dilation = 2;
  const auto src = SampleSource::from_manifests((dir / "s1.jsonl").string(), (dir / "s2.jsonl").string(), 16,
                                                NaiveInpaint(), cfg);
  CHECK(src.triplets().size() == 2);
  CHECK(src.reals().size() == 2);
  CHECK(src.size() == 6);
  CHECK(src.triplets()[0].original.height() == 16);
  CHECK(src.reals()[1].inpainted.width() == 16);
}
