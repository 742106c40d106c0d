#include <harmonia/losses.hpp>

#include <cmath>
#include <stdexcept>

namespace harmonia {

void LossWeights::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must be in [0,1]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

namespace {

double neg_log(double v, double eps) { return -std::log(std::max(v, eps)); }

// Per-image kernels shared by the plain and differentiable forms.

double real_term(const double* d, std::int64_t n, double eps) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += neg_log(d[i], eps);
  return s / double(n);
}

void real_term_grad(const double* d, std::int64_t n, double eps, double scale, double* g) {
  for (std::int64_t i = 0; i < n; ++i) g[i] = d[i] > eps ? -scale / (d[i] * double(n)) : 0.0;
}

double fake_term(const double* d, const double* m, std::int64_t n, double eps) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    s += (1.0 - m[i]) * neg_log(d[i], eps) + m[i] * neg_log(1.0 - d[i], eps);
  }
  return s / double(n);
}

void fake_term_grad(const double* d, const double* m, std::int64_t n, double eps, double scale,
                    double* g) {
  for (std::int64_t i = 0; i < n; ++i) {
    double v = 0.0;
    if (d[i] > eps) v -= (1.0 - m[i]) / d[i];
    if (1.0 - d[i] > eps) v += m[i] / (1.0 - d[i]);
    g[i] = scale * v / double(n);
  }
}

double mask_total(const double* m, std::int64_t n) {
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += m[i];
  if (!(s > 0.0)) throw std::invalid_argument("gen_loss: mask has no foreground pixels");
  return s;
}

double gen_term(const double* d, const double* m, std::int64_t n, double eps) {
  const double total = mask_total(m, n);
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += m[i] * neg_log(d[i], eps);
  return s / total;
}

void gen_term_grad(const double* d, const double* m, std::int64_t n, double eps, double scale,
                   double* g) {
  const double total = mask_total(m, n);
  for (std::int64_t i = 0; i < n; ++i) g[i] = d[i] > eps ? -scale * m[i] / (d[i] * total) : 0.0;
}

void require_match(const ScoreMap& s, const MaskD& m, const char* op) {
  detail::require_same_size(s, m, op, "mask");
}

}  // namespace

double l1_loss(const ImageTensor& pred, const ImageTensor& target) {
  detail::require_same_size(pred, target, "l1_loss", "target");
  if (pred.channels() != target.channels()) throw std::invalid_argument("l1_loss: channel mismatch");
  if (pred.data().size() == 0) throw std::invalid_argument("l1_loss: empty images");
  return (pred.data().cast<double>() - target.data().cast<double>()).abs().mean();
}

double disc_loss(std::span<const ScoreMap> real, std::span<const ScoreMap> fake,
                 std::span<const MaskD> fake_masks, const LossWeights& w) {
  w.validate();
  if (fake.size() != fake_masks.size()) throw std::invalid_argument("disc_loss: fake/mask count mismatch");
  double loss = 0.0;
  if (!real.empty()) {
    double s = 0.0;
    for (const auto& r : real) s += real_term(r.data().data(), r.pixels(), w.epsilon);
    loss += s / double(real.size());
  }
  if (!fake.empty()) {
    double s = 0.0;
    for (std::size_t i = 0; i < fake.size(); ++i) {
      require_match(fake[i], fake_masks[i], "disc_loss");
      s += fake_term(fake[i].data().data(), fake_masks[i].data().data(), fake[i].pixels(), w.epsilon);
    }
    loss += s / double(fake.size());
  }
  return loss;
}

double gen_loss(std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks, const LossWeights& w) {
  w.validate();
  if (fake.empty() || fake.size() != fake_masks.size()) throw std::invalid_argument("gen_loss: fake/mask count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < fake.size(); ++i) {
    require_match(fake[i], fake_masks[i], "gen_loss");
    s += gen_term(fake[i].data().data(), fake_masks[i].data().data(), fake[i].pixels(), w.epsilon);
  }
  return s / double(fake.size());
}

double combined_supervised_loss(double l1, double gen, const LossWeights& w) {
  w.validate();
  return w.lambda * l1 + (1.0 - w.lambda) * gen;
}

double combined_supervised_loss(const ImageTensor& pred, const ImageTensor& target,
                                std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks,
                                const LossWeights& w) {
  return combined_supervised_loss(l1_loss(pred, target), gen_loss(fake, fake_masks, w), w);
}

double unsupervised_loss(std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks,
                         const LossWeights& w) {
  return (1.0 - w.lambda) * gen_loss(fake, fake_masks, w);
}

namespace ad {

namespace {

struct MapGeometry {
  int n;
  std::int64_t plane;
};

MapGeometry score_geometry(const Var& scores, const Var& mask, const char* op) {
  const auto& s = scores.shape();
  if (s.size() != 4 || s[1] != 1) throw std::invalid_argument(std::string(op) + ": scores must be [N,1,H,W]");
  if (mask.valid() && mask.shape() != s) throw std::invalid_argument(std::string(op) + ": mask shape mismatch");
  return {s[0], std::int64_t(s[2]) * s[3]};
}

}  // namespace

Var disc_loss(const Var& real, const Var& fake, const Var& fake_mask, const LossWeights& w) {
  w.validate();
  const double eps = w.epsilon;
  const Var some = real.valid() ? real : fake;
  if (!some.valid()) throw std::invalid_argument("disc_loss: no score maps");
  Tape& t = *some.tape();
  double value = 0.0;
  MapGeometry rg{0, 0}, fg{0, 0};
  std::vector<Var> inputs;
  if (real.valid()) {
    rg = score_geometry(real, Var(), "disc_loss");
    double s = 0.0;
    for (int b = 0; b < rg.n; ++b) s += real_term(real.value().data() + b * rg.plane, rg.plane, eps);
    value += s / rg.n;
    inputs.push_back(real);
  }
  if (fake.valid()) {
    fg = score_geometry(fake, fake_mask, "disc_loss");
    double s = 0.0;
    for (int b = 0; b < fg.n; ++b) {
      s += fake_term(fake.value().data() + b * fg.plane, fake_mask.value().data() + b * fg.plane, fg.plane, eps);
    }
    value += s / fg.n;
    inputs.push_back(fake);
  }
  return t.record({1}, Array::Constant(1, value), inputs, [real, fake, fake_mask, rg, fg, eps](Tape& t, const Array& g) {
    if (real.valid() && t.requires_grad(real)) {
      Array d(real.value().size());
      for (int b = 0; b < rg.n; ++b) {
        real_term_grad(real.value().data() + b * rg.plane, rg.plane, eps, g[0] / rg.n, d.data() + b * rg.plane);
      }
      t.accumulate(real, d);
    }
    if (fake.valid() && t.requires_grad(fake)) {
      Array d(fake.value().size());
      for (int b = 0; b < fg.n; ++b) {
        fake_term_grad(fake.value().data() + b * fg.plane, fake_mask.value().data() + b * fg.plane, fg.plane, eps,
                       g[0] / fg.n, d.data() + b * fg.plane);
      }
      t.accumulate(fake, d);
    }
  });
}

Var gen_loss(const Var& fake, const Var& fake_mask, const LossWeights& w) {
  w.validate();
  const double eps = w.epsilon;
  const auto geo = score_geometry(fake, fake_mask, "gen_loss");
  double s = 0.0;
  for (int b = 0; b < geo.n; ++b) {
    s += gen_term(fake.value().data() + b * geo.plane, fake_mask.value().data() + b * geo.plane, geo.plane, eps);
  }
  Tape& t = *fake.tape();
  return t.record({1}, Array::Constant(1, s / geo.n), {fake}, [fake, fake_mask, geo, eps](Tape& t, const Array& g) {
    Array d(fake.value().size());
    for (int b = 0; b < geo.n; ++b) {
      gen_term_grad(fake.value().data() + b * geo.plane, fake_mask.value().data() + b * geo.plane, geo.plane, eps,
                    g[0] / geo.n, d.data() + b * geo.plane);
    }
    t.accumulate(fake, d);
  });
}

Var combined_supervised_loss(const Var& pred, const Var& target, const Var& fake, const Var& fake_mask,
                             const LossWeights& w) {
  w.validate();
  const Var rec = scale(l1_loss(pred, target), w.lambda);
  if (w.lambda == 1.0) return rec;
  return add(rec, scale(gen_loss(fake, fake_mask, w), 1.0 - w.lambda));
}

}  // namespace ad

}  // namespace harmonia
