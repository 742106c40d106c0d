#pragma once

#include <harmonia/autodiff.hpp>
#include <harmonia/image.hpp>

#include <span>

namespace harmonia {

struct LossWeights {
  double lambda = 0.92;
  double epsilon = 1e-7;

  void validate() const;
};

/// Per-pixel discriminator output in (0, 1).
using ScoreMap = Mask<double>;
using MaskD = Mask<double>;

double l1_loss(const ImageTensor& pred, const ImageTensor& target);

/// Real pixels are scored against 1, fake pixels against 1 - M (binary
/// cross-entropy). Each term is the mean over images of per-image means;
/// an empty set contributes nothing.
double disc_loss(std::span<const ScoreMap> real, std::span<const ScoreMap> fake,
                 std::span<const MaskD> fake_masks, const LossWeights& w = {});

/// Mask-weighted mean of -log D over generator-controlled pixels, averaged
/// over images. Throws std::invalid_argument if a mask is all zero.
double gen_loss(std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks,
                const LossWeights& w = {});

double combined_supervised_loss(double l1, double gen, const LossWeights& w = {});
double combined_supervised_loss(const ImageTensor& pred, const ImageTensor& target,
                                std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks,
                                const LossWeights& w = {});
double unsupervised_loss(std::span<const ScoreMap> fake, std::span<const MaskD> fake_masks,
                         const LossWeights& w = {});

namespace ad {

/// Batched forms over [N,1,H,W] score maps; masks are constants. `real` may
/// be a default-constructed Var (no real images).
Var disc_loss(const Var& real, const Var& fake, const Var& fake_mask, const LossWeights& w = {});
Var gen_loss(const Var& fake, const Var& fake_mask, const LossWeights& w = {});
/// lambda * l1(pred, target) + (1 - lambda) * gen_loss(fake, mask).
Var combined_supervised_loss(const Var& pred, const Var& target, const Var& fake,
                             const Var& fake_mask, const LossWeights& w = {});

}  // namespace ad

}  // namespace harmonia
