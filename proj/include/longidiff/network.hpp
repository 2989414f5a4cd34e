#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "longidiff/ops.hpp"
#include "longidiff/tensor.hpp"
#include "longidiff/volume.hpp"

namespace longidiff {

/// The three ablation variants: a plain single-timepoint U-Net, the naive
/// channel-concat longitudinal baseline, and the difference-weighted
/// siamese network.
enum class Variant { Single, Concat, DiffWeight };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::DiffWeight;
  /// Resolution stages including the bottleneck; >= 2.
  int levels = 3;
  /// Channels at the finest stage; doubled per level, capped at max_channels.
  int base_channels = 8;
  int max_channels = 256;
  /// Conv kernel extent (cubic). The head conv is always 1x1x1.
  int kernel = 3;
  int convs_per_stage = 2;
  int num_classes = 2;
  /// Image channels per timepoint. The concat variant stacks two timepoints,
  /// so its stem consumes 2 * in_channels.
  int in_channels = 1;
  /// Apply difference weighting to the bottleneck features as well as the
  /// skip connections (diffweight variant only).
  bool fuse_bottleneck = true;
  double norm_eps = 1e-5;
  double leaky_slope = 0.01;

  void validate() const;
  int channels_at(int level) const;
  int stem_channels() const;
  /// Required divisor of every spatial extent: 2^(levels-1).
  int spatial_divisor() const;
};

/// Ordered, named parameter set. Encoder parameters appear exactly once;
/// the siamese pass reuses them for both timepoints.
struct ModelWeights {
  std::vector<std::pair<std::string, Tensor>> params;

  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
  bool contains(const std::string& name) const;
  int64_t param_count() const;
  void set_requires_grad(bool enabled);
  void zero_grads();
};

/// Fan-in-scaled normal init (gain for the configured leaky slope), zero
/// biases, fully determined by (cfg, seed).
ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed);

/// Encoder pass: one feature tensor per level, coarsest last. Feature i has
/// spatial extents divided by 2^i and channels_at(i) channels.
std::vector<Tensor> encode(const Tensor& x, const ModelConfig& cfg,
                           const ModelWeights& weights);

/// Decoder pass over per-level features (as produced by encode, possibly
/// fused), ending in the 1x1x1 classification head.
Tensor decode(const std::vector<Tensor>& features, const ModelConfig& cfg,
              const ModelWeights& weights);

/// x_c * InstNorm(x_c - x_p) + x_c, elementwise, parameter-free. The
/// normalized difference acts as an attention map over regions of temporal
/// change; when the difference is constant (in particular zero) per channel
/// the block returns x_c unchanged.
Tensor difference_weighting(const Tensor& x_c, const Tensor& x_p, double eps = 1e-5);

Tensor forward_single(const Tensor& x, const ModelConfig& cfg,
                      const ModelWeights& weights);
Tensor forward_concat(const Tensor& x_c, const Tensor& x_p, const ModelConfig& cfg,
                      const ModelWeights& weights);
/// Siamese forward: both timepoints through the shared encoder, difference
/// weighting on every skip connection (and the bottleneck iff
/// cfg.fuse_bottleneck), decode of the current timepoint's fused features.
Tensor forward_longitudinal(const Tensor& x_c, const Tensor& x_p,
                            const ModelConfig& cfg, const ModelWeights& weights);

/// Variant dispatch used by trainer and inference. The prior tensor is
/// ignored by the single variant.
Tensor forward_variant(const Tensor& x_c, const Tensor& x_p, const ModelConfig& cfg,
                       const ModelWeights& weights);

/// Per-voxel argmax of 2-class logits [1,2,D,H,W]; exact ties resolve to
/// background so an untrained network yields a well-defined (empty) mask.
VolumeU8 predict_mask(const Tensor& logits);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelWeights& weights);

struct Checkpoint {
  ModelConfig config;
  ModelWeights weights;
};

/// Throws DataError on bad magic, unknown fields, truncated blobs, or
/// parameter shape mismatches against the declared config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace longidiff
