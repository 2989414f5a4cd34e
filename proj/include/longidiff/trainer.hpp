#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "longidiff/network.hpp"
#include "longidiff/preprocess.hpp"
#include "longidiff/synthdata.hpp"

namespace longidiff {

struct TrainConfig {
  int epochs = 12;
  int steps_per_epoch = 50;
  int batch_size = 2;
  std::array<int, 3> patch_size{32, 32, 32};
  double lr0 = 0.01;
  double momentum = 0.99;
  double poly_exponent = 0.9;
  /// Probability that a sampled patch is centered on a lesion voxel.
  double fg_prob = 0.5;
  uint64_t seed = 0;
  /// Epochs between validation passes; the final epoch always validates.
  int val_interval = 4;
  /// When the manifest has no val split, this many train patients double
  /// as the validation set.
  int max_val_patients = 3;

  void validate(const ModelConfig& model) const;
};

/// lr0 * (1 - step/total_steps)^exponent. step counts from 0; at
/// step == total_steps the rate is exactly 0.
double poly_lr(int64_t step, int64_t total_steps, double lr0, double exponent);

/// Heavy-ball SGD: v <- momentum * v + g; w <- w - lr * v. Parameters with
/// no accumulated gradient contribute g = 0 (their velocity still decays).
class SgdMomentum {
 public:
  SgdMomentum(const ModelWeights& weights, double momentum);
  void apply(ModelWeights& weights, double lr);
  int64_t step() const { return step_; }

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
  int64_t step_ = 0;
};

struct EpochRecord {
  int epoch = 0;           // 1-based
  double lr = 0.0;         // rate at the first step of the epoch
  double train_loss = 0.0; // mean over the epoch's steps
  std::optional<double> val_dsc;
};

struct TrainResult {
  ModelWeights final_weights;
  /// Weights at the best validation DSC; equal to final_weights when no
  /// validation ever ran.
  ModelWeights best_weights;
  double best_val_dsc = -1.0;
  int best_epoch = -1;
  std::vector<EpochRecord> log;
};

/// Cropped, normalized in-memory cohort ready for sampling.
struct TrainData {
  std::vector<PatientSeries> train;
  std::vector<PatientSeries> val;
};

/// Loads, crops, and z-score-normalizes the manifest's train and val
/// patients. Without a val split, up to max_val_patients train patients are
/// reused for validation.
TrainData load_training_data(const Manifest& manifest,
                             const std::filesystem::path& manifest_path,
                             int max_val_patients);

/// Full training loop: per step, batch_size patches are sampled (patient,
/// temporal direction, and location all drawn from the seeded stream) and
/// one SGD step taken at the polynomial rate. Deterministic given
/// (model_cfg, cfg, data). Throws TrainAbort on a non-finite loss.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const TrainData& data,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Tiles the volume with 50% window overlap (windows clamped to the volume,
/// zero-padded when the volume is smaller than a patch), averages softmax
/// probabilities across overlapping windows, then takes the per-voxel
/// argmax (ties to background).
VolumeU8 sliding_window_predict(const ModelWeights& weights,
                                const ModelConfig& model_cfg,
                                const VolumeF& current, const VolumeF& prior,
                                std::array<int, 3> patch_size);

/// Predicts every timepoint of a preprocessed series. The prior of each scan
/// is the immediately preceding one; the baseline scan uses the subsequent
/// follow-up as its prior.
std::vector<VolumeU8> predict_series(const ModelWeights& weights,
                                     const ModelConfig& model_cfg,
                                     const PatientSeries& series,
                                     std::array<int, 3> patch_size);

}  // namespace longidiff
