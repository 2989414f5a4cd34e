#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "longidiff/errors.hpp"
#include "longidiff/metrics.hpp"
#include "longidiff/network.hpp"
#include "longidiff/preprocess.hpp"
#include "longidiff/synthdata.hpp"
#include "longidiff/trainer.hpp"
#include "longidiff/verify.hpp"
#include "longidiff/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace longidiff;

namespace {

// ---------------------------------------------------------------------------
// Run configuration: one JSON file with phantom/model/train/gen/eval
// sections. Unknown keys are rejected at every level; CLI flags override
// individual fields; the fully resolved config is echoed into each output
// directory.

struct GenOptions {
  int patients = 50;
  std::vector<double> split_fractions{0.8, 0.2};
  uint64_t seed = 0;
};

struct EvalOptions {
  double iou_threshold = 0.1;
  double min_lesion_mm3 = 3.0;
  bool size_filter = true;
};

struct RunConfig {
  PhantomSpec phantom;
  ModelConfig model;
  TrainConfig train;
  GenOptions gen;
  EvalOptions eval;
};

double get_num(const json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError(where + " must be a number");
  return v.get<double>();
}

int get_int(const json& v, const std::string& where) {
  if (!v.is_number_integer())
    throw ConfigError(where + " must be an integer");
  return v.get<int>();
}

uint64_t get_seed(const json& v, const std::string& where) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0))
    throw ConfigError(where + " must be a non-negative integer");
  return v.get<uint64_t>();
}

bool get_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
  return v.get<bool>();
}

std::string get_str(const json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + " must be a string");
  return v.get<std::string>();
}

template <typename T, size_t N, typename Get>
std::array<T, N> get_array(const json& v, const std::string& where, Get get) {
  if (!v.is_array() || v.size() != N)
    throw ConfigError(where + " must be an array of " +
                      std::to_string(N) + " entries");
  std::array<T, N> out{};
  for (size_t i = 0; i < N; ++i) out[i] = static_cast<T>(get(v[i], where));
  return out;
}

void load_phantom(const json& j, PhantomSpec& s) {
  for (const auto& [key, v] : j.items()) {
    const std::string where = "phantom." + key;
    if (key == "dims") s.dims = get_array<int, 3>(v, where, get_int);
    else if (key == "spacing_mm") s.spacing_mm = get_array<double, 3>(v, where, get_num);
    else if (key == "brain_radius_frac") s.brain_radius_frac = get_num(v, where);
    else if (key == "timepoint_range") s.timepoint_range = get_array<int, 2>(v, where, get_int);
    else if (key == "persistent_count") s.persistent_count = get_array<int, 2>(v, where, get_int);
    else if (key == "new_count") s.new_count = get_array<int, 2>(v, where, get_int);
    else if (key == "distractor_count") s.distractor_count = get_array<int, 2>(v, where, get_int);
    else if (key == "lesion_radius_mm") s.lesion_radius_mm = get_array<double, 2>(v, where, get_num);
    else if (key == "persistent_contrast") s.persistent_contrast = get_array<double, 2>(v, where, get_num);
    else if (key == "new_contrast") s.new_contrast = get_array<double, 2>(v, where, get_num);
    else if (key == "distractor_contrast") s.distractor_contrast = get_array<double, 2>(v, where, get_num);
    else if (key == "texture_amplitude") s.texture_amplitude = get_num(v, where);
    else if (key == "texture_corr_mm") s.texture_corr_mm = get_num(v, where);
    else if (key == "noise_sigma") s.noise_sigma = get_num(v, where);
    else throw ConfigError("unknown key phantom." + key);
  }
}

void load_model(const json& j, ModelConfig& m) {
  for (const auto& [key, v] : j.items()) {
    const std::string where = "model." + key;
    if (key == "variant") m.variant = variant_from_name(get_str(v, where));
    else if (key == "levels") m.levels = get_int(v, where);
    else if (key == "base_channels") m.base_channels = get_int(v, where);
    else if (key == "max_channels") m.max_channels = get_int(v, where);
    else if (key == "kernel") m.kernel = get_int(v, where);
    else if (key == "convs_per_stage") m.convs_per_stage = get_int(v, where);
    else if (key == "num_classes") m.num_classes = get_int(v, where);
    else if (key == "in_channels") m.in_channels = get_int(v, where);
    else if (key == "fuse_bottleneck") m.fuse_bottleneck = get_bool(v, where);
    else if (key == "norm_eps") m.norm_eps = get_num(v, where);
    else if (key == "leaky_slope") m.leaky_slope = get_num(v, where);
    else throw ConfigError("unknown key model." + key);
  }
}

void load_train(const json& j, TrainConfig& t) {
  for (const auto& [key, v] : j.items()) {
    const std::string where = "train." + key;
    if (key == "epochs") t.epochs = get_int(v, where);
    else if (key == "steps_per_epoch") t.steps_per_epoch = get_int(v, where);
    else if (key == "batch_size") t.batch_size = get_int(v, where);
    else if (key == "patch_size") t.patch_size = get_array<int, 3>(v, where, get_int);
    else if (key == "lr0") t.lr0 = get_num(v, where);
    else if (key == "momentum") t.momentum = get_num(v, where);
    else if (key == "poly_exponent") t.poly_exponent = get_num(v, where);
    else if (key == "fg_prob") t.fg_prob = get_num(v, where);
    else if (key == "seed") t.seed = get_seed(v, where);
    else if (key == "val_interval") t.val_interval = get_int(v, where);
    else if (key == "max_val_patients") t.max_val_patients = get_int(v, where);
    else throw ConfigError("unknown key train." + key);
  }
}

void load_gen(const json& j, GenOptions& g) {
  for (const auto& [key, v] : j.items()) {
    const std::string where = "gen." + key;
    if (key == "patients") g.patients = get_int(v, where);
    else if (key == "seed") g.seed = get_seed(v, where);
    else if (key == "split_fractions") {
      if (!v.is_array() || (v.size() != 2 && v.size() != 3))
        throw ConfigError("gen.split_fractions must have 2 or 3 entries");
      g.split_fractions.clear();
      for (const auto& f : v) g.split_fractions.push_back(get_num(f, where));
    } else throw ConfigError("unknown key gen." + key);
  }
}

void load_eval(const json& j, EvalOptions& e) {
  for (const auto& [key, v] : j.items()) {
    const std::string where = "eval." + key;
    if (key == "iou_threshold") e.iou_threshold = get_num(v, where);
    else if (key == "min_lesion_mm3") e.min_lesion_mm3 = get_num(v, where);
    else if (key == "size_filter") e.size_filter = get_bool(v, where);
    else throw ConfigError("unknown key eval." + key);
  }
}

void merge_config_file(const fs::path& path, RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("top level must be an object");
  for (const auto& [key, v] : j.items()) {
    if (!v.is_object())
      throw ConfigError("section " + key + " must be an object");
    if (key == "phantom") load_phantom(v, cfg.phantom);
    else if (key == "model") load_model(v, cfg.model);
    else if (key == "train") load_train(v, cfg.train);
    else if (key == "gen") load_gen(v, cfg.gen);
    else if (key == "eval") load_eval(v, cfg.eval);
    else throw ConfigError("unknown section " + key);
  }
}

ordered_json config_to_json(const RunConfig& c) {
  ordered_json j;
  j["phantom"] = {{"dims", c.phantom.dims},
                  {"spacing_mm", c.phantom.spacing_mm},
                  {"brain_radius_frac", c.phantom.brain_radius_frac},
                  {"timepoint_range", c.phantom.timepoint_range},
                  {"persistent_count", c.phantom.persistent_count},
                  {"new_count", c.phantom.new_count},
                  {"distractor_count", c.phantom.distractor_count},
                  {"lesion_radius_mm", c.phantom.lesion_radius_mm},
                  {"persistent_contrast", c.phantom.persistent_contrast},
                  {"new_contrast", c.phantom.new_contrast},
                  {"distractor_contrast", c.phantom.distractor_contrast},
                  {"texture_amplitude", c.phantom.texture_amplitude},
                  {"texture_corr_mm", c.phantom.texture_corr_mm},
                  {"noise_sigma", c.phantom.noise_sigma}};
  j["model"] = {{"variant", variant_name(c.model.variant)},
                {"levels", c.model.levels},
                {"base_channels", c.model.base_channels},
                {"max_channels", c.model.max_channels},
                {"kernel", c.model.kernel},
                {"convs_per_stage", c.model.convs_per_stage},
                {"num_classes", c.model.num_classes},
                {"in_channels", c.model.in_channels},
                {"fuse_bottleneck", c.model.fuse_bottleneck},
                {"norm_eps", c.model.norm_eps},
                {"leaky_slope", c.model.leaky_slope}};
  j["train"] = {{"epochs", c.train.epochs},
                {"steps_per_epoch", c.train.steps_per_epoch},
                {"batch_size", c.train.batch_size},
                {"patch_size", c.train.patch_size},
                {"lr0", c.train.lr0},
                {"momentum", c.train.momentum},
                {"poly_exponent", c.train.poly_exponent},
                {"fg_prob", c.train.fg_prob},
                {"seed", c.train.seed},
                {"val_interval", c.train.val_interval},
                {"max_val_patients", c.train.max_val_patients}};
  j["gen"] = {{"patients", c.gen.patients},
              {"split_fractions", c.gen.split_fractions},
              {"seed", c.gen.seed}};
  j["eval"] = {{"iou_threshold", c.eval.iou_threshold},
               {"min_lesion_mm3", c.eval.min_lesion_mm3},
               {"size_filter", c.eval.size_filter}};
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void echo_config(const RunConfig& cfg, const fs::path& out_dir) {
  write_text(out_dir / "config.json", config_to_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

ordered_json epoch_to_json(const EpochRecord& rec) {
  ordered_json j;
  j["epoch"] = rec.epoch;
  j["lr"] = rec.lr;
  j["train_loss"] = rec.train_loss;
  if (rec.val_dsc)
    j["val_dsc"] = *rec.val_dsc;
  else
    j["val_dsc"] = nullptr;
  return j;
}

/// Trains one model, streaming the per-epoch log to out_dir/train_log.jsonl
/// and stdout.
TrainResult run_training(const RunConfig& cfg, const TrainData& data,
                         const fs::path& out_dir, const std::string& tag) {
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary);
  if (!log) throw DataError("cannot write " + (out_dir / "train_log.jsonl").string());
  const TrainResult result =
      train(cfg.model, cfg.train, data, [&](const EpochRecord& rec) {
        log << epoch_to_json(rec).dump() << "\n";
        log.flush();
        std::printf("[%s] epoch %3d/%d  lr %.6f  loss %.4f", tag.c_str(),
                    rec.epoch, cfg.train.epochs, rec.lr, rec.train_loss);
        if (rec.val_dsc) std::printf("  val_dsc %.4f", *rec.val_dsc);
        std::printf("\n");
        std::fflush(stdout);
      });
  return result;
}

/// Predicts every timepoint of the split's patients in preprocessed space
/// and evaluates against the preprocessed ground truth (the joint crop is
/// shared by image and mask, so metrics agree with full-grid evaluation
/// whenever the crop loses no mask voxels, which load_patient data
/// guarantees for phantoms).
CohortReport evaluate_weights(const ModelWeights& weights, const ModelConfig& mc,
                              const std::vector<PatientSeries>& patients,
                              std::array<int, 3> patch_size,
                              const EvalOptions& eval) {
  std::vector<ScanMetrics> scans;
  for (const auto& series : patients) {
    const auto preds = predict_series(weights, mc, series, patch_size);
    for (size_t t = 0; t < preds.size(); ++t) {
      ScanMetrics m =
          evaluate_scan(series.timepoints[t].mask, preds[t], series.spacing_mm,
                        eval.iou_threshold, eval.min_lesion_mm3, eval.size_filter);
      m.patient_id = series.patient_id;
      m.timepoint = static_cast<int>(t);
      scans.push_back(std::move(m));
    }
  }
  return aggregate(scans);
}

std::vector<PatientSeries> load_split(const Manifest& manifest,
                                      const fs::path& manifest_path,
                                      const std::string& split) {
  std::vector<PatientSeries> out;
  for (const auto* p : manifest.in_split(split))
    out.push_back(preprocess_series(load_patient(manifest, *p, manifest_path)));
  if (out.empty()) throw DataError("split '" + split + "' has no patients");
  return out;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.phantom.validate();
  const Manifest manifest = generate_cohort(cfg.phantom, cfg.gen.patients,
                                            cfg.gen.split_fractions, cfg.gen.seed,
                                            out_dir);
  echo_config(cfg, out_dir);
  const auto names = split_names(cfg.gen.split_fractions.size());
  std::string split_note;
  for (const auto& name : names) {
    split_note += split_note.empty() ? "" : ", ";
    split_note += std::to_string(manifest.in_split(name).size()) + " " + name;
  }
  std::printf("generated %d patients (%s) into %s\n", cfg.gen.patients,
              split_note.c_str(), out_dir.string().c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& data_dir,
              const fs::path& out_dir) {
  cfg.train.validate(cfg.model);
  const fs::path manifest_path = data_dir / "manifest.json";
  const Manifest manifest = read_manifest(manifest_path);
  const TrainData data =
      load_training_data(manifest, manifest_path, cfg.train.max_val_patients);
  std::printf("training %s on %zu train / %zu val patients\n",
              variant_name(cfg.model.variant).c_str(), data.train.size(),
              data.val.size());

  fs::create_directories(out_dir);
  echo_config(cfg, out_dir);
  const TrainResult result =
      run_training(cfg, data, out_dir, variant_name(cfg.model.variant));
  save_checkpoint(out_dir / "checkpoint_final.ckpt", cfg.model,
                  result.final_weights);
  save_checkpoint(out_dir / "checkpoint_best.ckpt", cfg.model, result.best_weights);
  if (result.best_epoch > 0)
    std::printf("best validation DSC %.4f at epoch %d\n", result.best_val_dsc,
                result.best_epoch);
  std::printf("checkpoints written to %s\n", out_dir.string().c_str());
  return 0;
}

int cmd_predict(const RunConfig& cfg, const fs::path& ckpt_path,
                const fs::path& data_dir, const std::string& split,
                const fs::path& out_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const fs::path manifest_path = data_dir / "manifest.json";
  const Manifest manifest = read_manifest(manifest_path);
  const auto patients = manifest.in_split(split);
  if (patients.empty()) throw DataError("split '" + split + "' has no patients");

  fs::create_directories(out_dir);
  echo_config(cfg, out_dir);
  ordered_json index;
  index["format"] = "longidiff-predictions v1";
  index["split"] = split;
  index["patch_size"] = cfg.train.patch_size;
  index["patients"] = ordered_json::array();

  for (const auto* p : patients) {
    const PatientSeries raw = load_patient(manifest, *p, manifest_path);
    const CropResult crop = crop_to_joint_bbox(raw);
    PatientSeries prep = crop.series;
    for (auto& tp : prep.timepoints) tp.image = zscore_normalize(tp.image);

    const auto preds =
        predict_series(ckpt.weights, ckpt.config, prep, cfg.train.patch_size);

    // Predictions live on the cropped grid; embed them back into the full
    // grid so they compare directly against the on-disk ground truth.
    for (size_t t = 0; t < preds.size(); ++t) {
      VolumeU8 full(raw.timepoints[t].mask.dims);
      for (int z = 0; z < preds[t].dims[2]; ++z)
        for (int y = 0; y < preds[t].dims[1]; ++y)
          for (int x = 0; x < preds[t].dims[0]; ++x)
            full.at(crop.bbox.lo[0] + x, crop.bbox.lo[1] + y,
                    crop.bbox.lo[2] + z) = preds[t].at(x, y, z);
      const fs::path path =
          out_dir / p->patient_id / ("tp" + std::to_string(t) + "_pred.vol");
      fs::create_directories(path.parent_path());
      write_volume(path, full, raw.spacing_mm);
    }
    index["patients"].push_back(
        {{"patient_id", p->patient_id},
         {"timepoints", static_cast<int>(preds.size())}});
    std::printf("predicted %s (%zu timepoints)\n", p->patient_id.c_str(),
                preds.size());
  }
  write_text(out_dir / "predictions.json", index.dump(2) + "\n");
  return 0;
}

int cmd_eval(const RunConfig& cfg, const fs::path& pred_dir,
             const fs::path& gt_dir, const fs::path& report_path) {
  const fs::path manifest_path = gt_dir / "manifest.json";
  const Manifest manifest = read_manifest(manifest_path);

  std::vector<ScanMetrics> scans;
  for (const auto& p : manifest.patients) {
    const fs::path first = pred_dir / p.patient_id / "tp0_pred.vol";
    if (!fs::exists(first)) continue;
    for (size_t t = 0; t < p.timepoints.size(); ++t) {
      const fs::path pred_path =
          pred_dir / p.patient_id / ("tp" + std::to_string(t) + "_pred.vol");
      const fs::path gt_path = gt_dir / p.timepoints[t].mask;
      const VolumeU8 pred = read_volume_u8(pred_path);
      const VolumeU8 gt = read_volume_u8(gt_path);
      if (!gt.same_dims(pred))
        throw DataError("prediction/ground-truth shape mismatch for " +
                        pred_path.string());
      ScanMetrics m =
          evaluate_scan(gt, pred, manifest.spacing_mm, cfg.eval.iou_threshold,
                        cfg.eval.min_lesion_mm3, cfg.eval.size_filter);
      m.patient_id = p.patient_id;
      m.timepoint = static_cast<int>(t);
      scans.push_back(std::move(m));
    }
  }
  if (scans.empty())
    throw DataError("no predictions found under " + pred_dir.string());

  const CohortReport report = aggregate(scans);
  write_text(report_path, report_to_json(report));
  echo_config(cfg, report_path.parent_path());
  std::printf("%s", render_report_table(report).c_str());
  std::printf("report written to %s\n", report_path.string().c_str());
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& data_dir, int seeds,
               const fs::path& out_dir) {
  if (seeds <= 0) throw ConfigError("--seeds must be positive");
  cfg.train.validate(cfg.model);

  const fs::path manifest_path = data_dir / "manifest.json";
  const Manifest manifest = read_manifest(manifest_path);
  const TrainData data =
      load_training_data(manifest, manifest_path, cfg.train.max_val_patients);
  const std::vector<PatientSeries> test = load_split(manifest, manifest_path, "test");
  std::printf("ablation: %zu train / %zu val / %zu test patients, %d seeds\n",
              data.train.size(), data.val.size(), test.size(), seeds);

  fs::create_directories(out_dir);
  echo_config(cfg, out_dir);

  // Row order mirrors the single-timepoint -> longitudinal progression.
  const std::vector<Variant> variants = {Variant::Single, Variant::Concat,
                                         Variant::DiffWeight};
  ordered_json variants_json = ordered_json::array();
  std::string table =
      "variant         DSC    HD95      F1   (means over seeds)\n";

  for (Variant v : variants) {
    RunConfig run = cfg;
    run.model.variant = v;
    const std::string vname = variant_name(v);

    ordered_json per_seed = ordered_json::array();
    std::vector<CohortReport> reports;
    for (int k = 0; k < seeds; ++k) {
      run.train.seed = cfg.train.seed + static_cast<uint64_t>(k);
      const fs::path run_dir = out_dir / vname / ("seed" + std::to_string(k));
      const TrainResult result = run_training(
          run, data, run_dir, vname + "/seed" + std::to_string(k));
      save_checkpoint(run_dir / "checkpoint_best.ckpt", run.model,
                      result.best_weights);

      const CohortReport rep =
          evaluate_weights(result.best_weights, run.model, test,
                           run.train.patch_size, run.eval);
      write_text(run_dir / "report.json", report_to_json(rep));
      reports.push_back(rep);

      ordered_json sj;
      sj["seed"] = run.train.seed;
      sj["dsc"] = rep.dsc;
      sj["f1"] = rep.f1;
      sj["hd95_mm"] = rep.hd95_mm ? ordered_json(*rep.hd95_mm) : ordered_json(nullptr);
      per_seed.push_back(sj);
      std::printf("[%s seed %d] test DSC %.4f  F1 %.4f  HD95 %s\n", vname.c_str(),
                  k, rep.dsc, rep.f1,
                  rep.hd95_mm ? format_double(*rep.hd95_mm).c_str() : "n/a");
      std::fflush(stdout);
    }

    double dsc = 0.0, f1 = 0.0, hd = 0.0;
    int hd_n = 0;
    for (const auto& r : reports) {
      dsc += r.dsc;
      f1 += r.f1;
      if (r.hd95_mm) {
        hd += *r.hd95_mm;
        ++hd_n;
      }
    }
    dsc /= reports.size();
    f1 /= reports.size();
    const std::optional<double> hd_mean =
        hd_n > 0 ? std::optional<double>(hd / hd_n) : std::nullopt;

    // Per-patient distributions across seeds (first-seed patient order).
    ordered_json per_patient = ordered_json::array();
    for (size_t pi = 0; pi < reports[0].patients.size(); ++pi) {
      ordered_json pj;
      pj["patient_id"] = reports[0].patients[pi].patient_id;
      ordered_json dscs = ordered_json::array(), f1s = ordered_json::array(),
                   hds = ordered_json::array();
      for (const auto& r : reports) {
        dscs.push_back(r.patients[pi].dsc);
        f1s.push_back(r.patients[pi].f1);
        hds.push_back(r.patients[pi].hd95_mm ? ordered_json(*r.patients[pi].hd95_mm)
                                             : ordered_json(nullptr));
      }
      pj["dsc"] = dscs;
      pj["f1"] = f1s;
      pj["hd95_mm"] = hds;
      per_patient.push_back(pj);
    }

    ordered_json vj;
    vj["variant"] = vname;
    vj["mean_dsc"] = dsc;
    vj["mean_f1"] = f1;
    vj["mean_hd95_mm"] = hd_mean ? ordered_json(*hd_mean) : ordered_json(nullptr);
    vj["per_seed"] = per_seed;
    vj["per_patient"] = per_patient;
    variants_json.push_back(vj);

    char row[128];
    char hdbuf[24];
    if (hd_mean)
      std::snprintf(hdbuf, sizeof(hdbuf), "%7.2f", *hd_mean);
    else
      std::snprintf(hdbuf, sizeof(hdbuf), "%7s", "n/a");
    std::snprintf(row, sizeof(row), "%-10s %8.4f %s %7.4f\n", vname.c_str(), dsc,
                  hdbuf, f1);
    table += row;
  }

  ordered_json aj;
  aj["format"] = "longidiff-ablation v1";
  aj["seeds"] = seeds;
  aj["base_seed"] = cfg.train.seed;
  aj["variants"] = variants_json;
  write_text(out_dir / "ablation.json", aj.dump(2) + "\n");
  write_text(out_dir / "ablation.txt", table);
  std::printf("%s", table.c_str());
  std::printf("ablation results written to %s\n", out_dir.string().c_str());
  return 0;
}

int cmd_verify(const std::string& suite) {
  std::vector<CheckResult> checks;
  auto append = [&](std::vector<CheckResult> more) {
    checks.insert(checks.end(), more.begin(), more.end());
  };
  if (suite == "gradcheck" || suite == "all") append(verify_gradcheck());
  if (suite == "block-identities" || suite == "all")
    append(verify_block_identities());
  if (suite == "metric-oracles" || suite == "all") append(verify_metric_oracles());
  std::printf("%s", render_checks(checks).c_str());
  if (!all_passed(checks)) {
    int failed = 0;
    for (const auto& c : checks) failed += c.passed ? 0 : 1;
    std::fprintf(stderr, "error: verify: %d of %zu checks failed\n", failed,
                 checks.size());
    return 4;
  }
  std::printf("all %zu checks passed\n", checks.size());
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Longitudinal lesion segmentation with temporal difference "
               "weighting: data generation, training, inference, evaluation"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads,
                 "Cap worker threads (default: LONGIDIFF_THREADS or all cores)")
      ->envname("LONGIDIFF_THREADS");

  RunConfig cfg;
  std::string config_file;
  std::string spec_file;
  std::string data_dir, out_dir, ckpt_path, pred_dir, gt_dir, report_path;
  std::string variant_str, split = "test", suite = "all";
  int patients = -1, seeds = 3;
  int64_t seed = -1;
  bool no_fuse = false, no_size_filter = false;
  double iou = -1.0, min_mm3 = -1.0;

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic cohort");
  gen->add_option("--patients", patients, "Number of patients");
  gen->add_option("--seed", seed, "Cohort seed");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--spec", spec_file, "Run config JSON (phantom/gen sections)");

  CLI::App* tr = app.add_subcommand("train", "Train one variant");
  tr->add_option("--variant", variant_str, "single | concat | diffweight");
  tr->add_option("--data", data_dir, "Cohort directory (with manifest.json)")
      ->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--config", config_file, "Run config JSON");
  tr->add_option("--seed", seed, "Training seed");
  tr->add_flag("--no-fuse-bottleneck", no_fuse,
               "Apply difference weighting to skips only");

  CLI::App* pr = app.add_subcommand("predict", "Predict masks for a split");
  pr->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  pr->add_option("--data", data_dir, "Cohort directory")->required();
  pr->add_option("--split", split, "Split to predict (default test)");
  pr->add_option("--out", out_dir, "Output directory")->required();
  pr->add_option("--config", config_file, "Run config JSON");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate predictions");
  ev->add_option("--pred", pred_dir, "Prediction directory")->required();
  ev->add_option("--gt", gt_dir, "Ground-truth cohort directory")->required();
  ev->add_option("--iou", iou, "Lesion match IoU threshold (default 0.1)");
  ev->add_option("--min-lesion-mm3", min_mm3,
                 "Minimum lesion volume in mm^3 (default 3.0)");
  ev->add_flag("--no-size-filter", no_size_filter, "Disable the size filter");
  ev->add_option("--report", report_path, "Report JSON path")->required();
  ev->add_option("--config", config_file, "Run config JSON");

  CLI::App* ab = app.add_subcommand("ablate", "Train and compare all variants");
  ab->add_option("--data", data_dir, "Cohort directory")->required();
  ab->add_option("--seeds", seeds, "Seeds per variant (default 3)");
  ab->add_option("--out", out_dir, "Output directory")->required();
  ab->add_option("--config", config_file, "Run config JSON");

  CLI::App* vf = app.add_subcommand("verify", "Run verification suites");
  vf->add_option("suite", suite,
                 "gradcheck | block-identities | metric-oracles | all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints help or the parse error
    return code == 0 ? 0 : 2;
  }

  if (threads != 0 && threads < 1)
    throw ConfigError("--threads must be >= 1");

  if (!spec_file.empty()) merge_config_file(spec_file, cfg);
  if (!config_file.empty()) merge_config_file(config_file, cfg);

  if (gen->parsed()) {
    if (patients >= 0) cfg.gen.patients = patients;
    if (seed >= 0) cfg.gen.seed = static_cast<uint64_t>(seed);
    return cmd_gen(cfg, out_dir);
  }
  if (tr->parsed()) {
    if (!variant_str.empty()) cfg.model.variant = variant_from_name(variant_str);
    if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
    if (no_fuse) cfg.model.fuse_bottleneck = false;
    return cmd_train(cfg, data_dir, out_dir);
  }
  if (pr->parsed()) return cmd_predict(cfg, ckpt_path, data_dir, split, out_dir);
  if (ev->parsed()) {
    if (iou >= 0) cfg.eval.iou_threshold = iou;
    if (min_mm3 >= 0) cfg.eval.min_lesion_mm3 = min_mm3;
    if (no_size_filter) cfg.eval.size_filter = false;
    return cmd_eval(cfg, pred_dir, gt_dir, report_path);
  }
  if (ab->parsed()) return cmd_ablate(cfg, data_dir, seeds, out_dir);
  if (vf->parsed()) {
    if (suite != "all" && suite != "gradcheck" && suite != "block-identities" &&
        suite != "metric-oracles")
      throw ConfigError("unknown verify suite '" + suite + "'");
    return cmd_verify(suite);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: data: %s\n", e.what());
    return 3;
  } catch (const TrainAbort& e) {
    std::fprintf(stderr, "error: train-abort: step=%lld lr=%s %s\n",
                 static_cast<long long>(e.step), format_double(e.lr).c_str(),
                 e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
}
