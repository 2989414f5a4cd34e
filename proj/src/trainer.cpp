#include "longidiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "longidiff/errors.hpp"
#include "longidiff/metrics.hpp"
#include "longidiff/ops.hpp"

namespace longidiff {

namespace {

ModelWeights clone_weights(const ModelWeights& w) {
  ModelWeights out;
  for (const auto& [name, t] : w.params) out.params.emplace_back(name, t.detached());
  return out;
}

int64_t patch_numel(std::array<int, 3> p) {
  return static_cast<int64_t>(p[0]) * p[1] * p[2];
}

/// [N,1,D,H,W] with D=z, H=y, W=x: the volume's x-fastest layout is exactly
/// the tensor's W-fastest layout, so samples copy contiguously.
Tensor batch_tensor(int n, std::array<int, 3> patch) {
  return Tensor::zeros({n, 1, patch[2], patch[1], patch[0]});
}

void fill_sample(Tensor& batch, int sample, const VolumeF& v) {
  auto dst = batch.data_mut<float>();
  std::memcpy(dst.data() + sample * v.numel(), v.voxels.data(),
              static_cast<size_t>(v.numel()) * sizeof(float));
}

void fill_sample(Tensor& batch, int sample, const VolumeU8& v) {
  auto dst = batch.data_mut<float>();
  float* out = dst.data() + sample * v.numel();
  for (size_t i = 0; i < v.voxels.size(); ++i)
    out[i] = static_cast<float>(v.voxels[i]);
}

/// Window starts covering [0, n) with ~50% overlap, clamped to the volume.
std::vector<int> axis_starts(int n, int patch) {
  if (n <= patch) return {0};
  const int step = std::max(1, patch / 2);
  std::vector<int> starts;
  for (int pos = 0;; pos += step) {
    if (pos + patch >= n) {
      starts.push_back(n - patch);
      break;
    }
    starts.push_back(pos);
  }
  return starts;
}

/// Patient-weighted voxel Dice of sliding-window predictions over a set of
/// preprocessed series.
double validation_dice(const ModelWeights& weights, const ModelConfig& mc,
                       const std::vector<PatientSeries>& patients,
                       std::array<int, 3> patch) {
  double patient_sum = 0.0;
  for (const auto& series : patients) {
    const auto preds = predict_series(weights, mc, series, patch);
    double scan_sum = 0.0;
    for (size_t t = 0; t < preds.size(); ++t)
      scan_sum += dice(series.timepoints[t].mask, preds[t]);
    patient_sum += scan_sum / static_cast<double>(preds.size());
  }
  return patient_sum / static_cast<double>(patients.size());
}

}  // namespace

void TrainConfig::validate(const ModelConfig& model) const {
  model.validate();
  if (epochs <= 0 || steps_per_epoch <= 0 || batch_size <= 0)
    throw ConfigError("TrainConfig: epochs, steps_per_epoch, and batch_size "
                      "must be positive");
  for (int p : patch_size) {
    if (p <= 0 || p % model.spatial_divisor() != 0)
      throw ConfigError("TrainConfig: patch extents must be positive and "
                        "divisible by " + std::to_string(model.spatial_divisor()));
  }
  if (!(lr0 > 0.0)) throw ConfigError("TrainConfig: lr0 must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("TrainConfig: momentum must be in [0, 1)");
  if (!(poly_exponent > 0.0))
    throw ConfigError("TrainConfig: poly_exponent must be positive");
  if (fg_prob < 0.0 || fg_prob > 1.0)
    throw ConfigError("TrainConfig: fg_prob must be in [0, 1]");
  if (val_interval <= 0 || max_val_patients < 0)
    throw ConfigError("TrainConfig: invalid validation settings");
}

double poly_lr(int64_t step, int64_t total_steps, double lr0, double exponent) {
  if (total_steps <= 0) throw ConfigError("poly_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw ConfigError("poly_lr: step outside [0, total_steps]");
  return lr0 * std::pow(1.0 - static_cast<double>(step) /
                                  static_cast<double>(total_steps),
                        exponent);
}

SgdMomentum::SgdMomentum(const ModelWeights& weights, double momentum)
    : momentum_(momentum) {
  for (const auto& [name, t] : weights.params)
    velocity_.push_back(Tensor::zeros(t.shape()));
}

void SgdMomentum::apply(ModelWeights& weights, double lr) {
  for (size_t i = 0; i < weights.params.size(); ++i) {
    Tensor& w = weights.params[i].second;
    auto v = velocity_[i].data_mut<float>();
    auto wd = w.data_mut<float>();
    const Tensor g = w.grad();
    if (g.defined()) {
      auto gd = g.data<float>();
      for (size_t k = 0; k < v.size(); ++k) {
        v[k] = static_cast<float>(momentum_) * v[k] + gd[k];
        wd[k] -= static_cast<float>(lr) * v[k];
      }
    } else {
      for (size_t k = 0; k < v.size(); ++k) {
        v[k] = static_cast<float>(momentum_) * v[k];
        wd[k] -= static_cast<float>(lr) * v[k];
      }
    }
  }
  ++step_;
}

TrainData load_training_data(const Manifest& manifest,
                             const std::filesystem::path& manifest_path,
                             int max_val_patients) {
  TrainData data;
  for (const auto& p : manifest.patients) {
    if (p.split != "train" && p.split != "val") continue;
    const auto series = preprocess_series(load_patient(manifest, p, manifest_path));
    (p.split == "train" ? data.train : data.val).push_back(series);
  }
  if (data.train.empty()) throw DataError("load_training_data: train split is empty");
  if (data.val.empty()) {
    const size_t n = std::min(data.train.size(),
                              static_cast<size_t>(max_val_patients));
    data.val.assign(data.train.begin(), data.train.begin() + n);
  }
  return data;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const TrainData& data,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate(model_cfg);
  if (data.train.empty()) throw DataError("train: no training patients");

  ScopedScalar f32(ScalarType::F32);
  ModelWeights weights = init_weights(model_cfg, derive_seed(cfg.seed, 101));
  weights.set_requires_grad(true);
  SgdMomentum opt(weights, cfg.momentum);
  Rng sampler(derive_seed(cfg.seed, 11));

  const int64_t total_steps =
      static_cast<int64_t>(cfg.epochs) * cfg.steps_per_epoch;

  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int64_t global = static_cast<int64_t>(epoch - 1) * cfg.steps_per_epoch + s;
      const double lr = poly_lr(global, total_steps, cfg.lr0, cfg.poly_exponent);

      Tensor current = batch_tensor(cfg.batch_size, cfg.patch_size);
      Tensor prior = batch_tensor(cfg.batch_size, cfg.patch_size);
      Tensor target = batch_tensor(cfg.batch_size, cfg.patch_size);
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& series = data.train[static_cast<size_t>(sampler.uniform_int(
            0, static_cast<int64_t>(data.train.size()) - 1))];
        const Direction dir =
            sampler.uniform() < 0.5 ? Direction::Forward : Direction::Backward;
        const auto pair =
            sample_patch_pair(series, dir, cfg.patch_size, cfg.fg_prob, sampler);
        fill_sample(current, b, pair.current);
        fill_sample(prior, b, pair.prior);
        fill_sample(target, b, pair.target);
      }

      const Tensor logits = forward_variant(current, prior, model_cfg, weights);
      const Tensor loss = dice_ce_loss(logits, target);
      const double loss_value = loss.values()[0];
      if (!std::isfinite(loss_value))
        throw TrainAbort("training loss is not finite at step " +
                             std::to_string(global),
                         global, lr);
      backward(loss);
      opt.apply(weights, lr);
      weights.zero_grads();
      loss_sum += loss_value;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = poly_lr(static_cast<int64_t>(epoch - 1) * cfg.steps_per_epoch,
                     total_steps, cfg.lr0, cfg.poly_exponent);
    rec.train_loss = loss_sum / cfg.steps_per_epoch;
    const bool validate_now =
        !data.val.empty() && (epoch % cfg.val_interval == 0 || epoch == cfg.epochs);
    if (validate_now) {
      rec.val_dsc = validation_dice(weights, model_cfg, data.val, cfg.patch_size);
      if (*rec.val_dsc > result.best_val_dsc) {
        result.best_val_dsc = *rec.val_dsc;
        result.best_epoch = epoch;
        result.best_weights = clone_weights(weights);
      }
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.final_weights = std::move(weights);
  if (result.best_epoch < 0) result.best_weights = clone_weights(result.final_weights);
  return result;
}

VolumeU8 sliding_window_predict(const ModelWeights& weights,
                                const ModelConfig& model_cfg,
                                const VolumeF& current, const VolumeF& prior,
                                std::array<int, 3> patch_size) {
  if (!current.same_dims(prior))
    throw std::invalid_argument("sliding_window_predict: volume shapes differ");
  for (int p : patch_size)
    if (p <= 0 || p % model_cfg.spatial_divisor() != 0)
      throw ConfigError("sliding_window_predict: patch extents must be "
                        "positive and divisible by " +
                        std::to_string(model_cfg.spatial_divisor()));

  ScopedScalar f32(ScalarType::F32);
  NoGradGuard no_grad;
  const auto dims = current.dims;
  const int64_t vox = patch_numel(patch_size);

  std::vector<double> prob1(static_cast<size_t>(current.numel()), 0.0);
  std::vector<double> hits(static_cast<size_t>(current.numel()), 0.0);

  for (int sz : axis_starts(dims[2], patch_size[2]))
    for (int sy : axis_starts(dims[1], patch_size[1]))
      for (int sx : axis_starts(dims[0], patch_size[0])) {
        const std::array<int, 3> lo = {sx, sy, sz};
        Tensor cur = batch_tensor(1, patch_size);
        Tensor pri = batch_tensor(1, patch_size);
        fill_sample(cur, 0, extract_window(current, lo, patch_size));
        fill_sample(pri, 0, extract_window(prior, lo, patch_size));

        const Tensor probs =
            softmax_channels(forward_variant(cur, pri, model_cfg, weights));
        const auto p = probs.data<float>();  // [1,2,D,H,W], class 1 at +vox
        for (int z = 0; z < patch_size[2]; ++z) {
          const int gz = sz + z;
          if (gz >= dims[2]) break;
          for (int y = 0; y < patch_size[1]; ++y) {
            const int gy = sy + y;
            if (gy >= dims[1]) break;
            for (int x = 0; x < patch_size[0]; ++x) {
              const int gx = sx + x;
              if (gx >= dims[0]) break;
              const int64_t local =
                  (static_cast<int64_t>(z) * patch_size[1] + y) * patch_size[0] + x;
              const auto g = static_cast<size_t>(current.index(gx, gy, gz));
              prob1[g] += p[static_cast<size_t>(vox + local)];
              hits[g] += 1.0;
            }
          }
        }
      }

  VolumeU8 out(dims);
  for (size_t i = 0; i < out.voxels.size(); ++i)
    out.voxels[i] = prob1[i] / hits[i] > 0.5 ? 1 : 0;
  return out;
}

std::vector<VolumeU8> predict_series(const ModelWeights& weights,
                                     const ModelConfig& model_cfg,
                                     const PatientSeries& series,
                                     std::array<int, 3> patch_size) {
  series.validate();
  std::vector<VolumeU8> out;
  for (size_t t = 0; t < series.timepoints.size(); ++t) {
    const size_t prior_tp = t == 0 ? 1 : t - 1;
    out.push_back(sliding_window_predict(weights, model_cfg,
                                         series.timepoints[t].image,
                                         series.timepoints[prior_tp].image,
                                         patch_size));
  }
  return out;
}

}  // namespace longidiff
