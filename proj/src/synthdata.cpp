#include "longidiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "longidiff/errors.hpp"
#include "longidiff/volume_io.hpp"

namespace longidiff {

namespace {

constexpr double kDeformAmplitude = 0.25;  // max radial displacement, x radius
constexpr double kDecayWidthMm = 0.8;      // intensity falloff outside the blob
constexpr double kPlacementMarginMm = 1.0;
constexpr int kPlacementAttempts = 200;
constexpr int kTextureWaves = 24;

void check_range(std::array<int, 2> r, int lo_min, const char* what) {
  if (r[0] < lo_min || r[1] < r[0])
    throw ConfigError(std::string("PhantomSpec: invalid ") + what + " range [" +
                      std::to_string(r[0]) + "," + std::to_string(r[1]) + "]");
}

void check_range(std::array<double, 2> r, double lo_min, const char* what) {
  if (!(r[0] >= lo_min) || !(r[1] >= r[0]))
    throw ConfigError(std::string("PhantomSpec: invalid ") + what + " range");
}

double dist_mm(std::array<double, 3> a, std::array<double, 3> b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Ground-truth radius along the unit direction u.
double deformed_radius(const LesionInfo& l, std::array<double, 3> u) {
  const double q = l.deform[0] * u[0] * u[0] + l.deform[1] * u[1] * u[1] +
                   l.deform[2] * u[2] * u[2] + l.deform[3] * u[0] * u[1] +
                   l.deform[4] * u[0] * u[2] + l.deform[5] * u[1] * u[2];
  return l.radius_mm * (1.0 + kDeformAmplitude * q);
}

/// Additive intensity of one blob at p: full contrast inside the ground
/// truth, linear falloff over kDecayWidthMm outside, zero beyond. Keeping
/// the ground-truth region at full contrast is what guarantees every
/// ground-truth voxel carries the lesion's whole temporal difference.
double lesion_intensity(const LesionInfo& l, std::array<double, 3> p_mm) {
  const double d = dist_mm(p_mm, l.center_mm);
  if (d > l.radius_mm * (1.0 + kDeformAmplitude) + kDecayWidthMm) return 0.0;
  if (d < 1e-12) return l.contrast;
  const std::array<double, 3> u = {(p_mm[0] - l.center_mm[0]) / d,
                                   (p_mm[1] - l.center_mm[1]) / d,
                                   (p_mm[2] - l.center_mm[2]) / d};
  const double r = deformed_radius(l, u);
  if (d <= r) return l.contrast;
  if (d >= r + kDecayWidthMm) return 0.0;
  return l.contrast * (1.0 - (d - r) / kDecayWidthMm);
}

/// Largest possible extent of a blob's intensity footprint.
double blob_reach_mm(double radius_mm) {
  return radius_mm * (1.0 + kDeformAmplitude) + kDecayWidthMm;
}

struct Wave {
  std::array<double, 3> k;
  double phase;
};

struct Brain {
  std::array<double, 3> center_mm;
  std::array<double, 3> radii_mm;

  double normalized_dist(std::array<double, 3> p) const {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double d = (p[i] - center_mm[i]) / radii_mm[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  bool contains(std::array<double, 3> p) const { return normalized_dist(p) <= 1.0; }
  double min_radius() const {
    return std::min({radii_mm[0], radii_mm[1], radii_mm[2]});
  }
};

/// Static per-patient tissue texture: a sum of random plane waves with
/// wavelengths around texture_corr_mm, scaled so the pointwise standard
/// deviation is texture_amplitude.
std::vector<Wave> draw_texture(const PhantomSpec& spec, Rng& rng) {
  std::vector<Wave> waves(kTextureWaves);
  for (auto& w : waves) {
    std::array<double, 3> dir;
    double norm = 0.0;
    do {
      dir = {rng.normal(), rng.normal(), rng.normal()};
      norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    } while (norm < 1e-9);
    const double mag = 2.0 * std::numbers::pi / spec.texture_corr_mm *
                       rng.uniform(0.7, 1.3) / norm;
    w.k = {dir[0] * mag, dir[1] * mag, dir[2] * mag};
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return waves;
}

double texture_at(const std::vector<Wave>& waves, double amplitude,
                  std::array<double, 3> p) {
  double s = 0.0;
  for (const auto& w : waves)
    s += std::cos(w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase);
  return amplitude * std::sqrt(2.0 / kTextureWaves) * s;
}

int draw_count(std::array<int, 2> range, Rng& rng) {
  return static_cast<int>(rng.uniform_int(range[0], range[1]));
}

/// Draws one blob's shape and tries to place it inside the brain with
/// clearance from the surface and from already placed blobs. Returns false
/// (and leaves `placed` untouched) when every attempt collides.
bool place_lesion(const PhantomSpec& spec, const Brain& brain, LesionKind kind,
                  std::array<double, 2> contrast_range, int n_timepoints, Rng& rng,
                  std::vector<LesionInfo>& placed) {
  LesionInfo l;
  l.kind = kind;
  l.radius_mm = rng.uniform(spec.lesion_radius_mm[0], spec.lesion_radius_mm[1]);
  l.contrast = rng.uniform(contrast_range[0], contrast_range[1]);
  double norm = 0.0;
  for (auto& c : l.deform) {
    c = rng.normal();
    norm += c * c;
  }
  norm = std::sqrt(norm);
  if (norm > 1e-9)
    for (auto& c : l.deform) c /= norm;
  l.onset_tp = kind == LesionKind::New
                   ? static_cast<int>(rng.uniform_int(1, n_timepoints - 1))
                   : 0;

  const double reach = blob_reach_mm(l.radius_mm);
  // A point at normalized ellipsoid distance rho has at least
  // (1 - rho) * min_radius of clearance to the surface.
  const double max_rho =
      1.0 - (reach + kPlacementMarginMm) / brain.min_radius();
  if (max_rho <= 0.0) return false;

  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    std::array<double, 3> c;
    for (int i = 0; i < 3; ++i)
      c[i] = brain.center_mm[i] +
             rng.uniform(-brain.radii_mm[i], brain.radii_mm[i]);
    if (brain.normalized_dist(c) > max_rho) continue;
    bool collides = false;
    for (const auto& other : placed) {
      if (dist_mm(c, other.center_mm) <
          reach + blob_reach_mm(other.radius_mm) + kPlacementMarginMm) {
        collides = true;
        break;
      }
    }
    if (collides) continue;
    l.center_mm = c;
    placed.push_back(l);
    return true;
  }
  return false;
}

nlohmann::ordered_json spacing_json(std::array<double, 3> s) {
  return nlohmann::ordered_json::array({s[0], s[1], s[2]});
}

}  // namespace

void PhantomSpec::validate() const {
  for (int d : dims)
    if (d < 8) throw ConfigError("PhantomSpec: dims must be >= 8 voxels per axis");
  for (double s : spacing_mm)
    if (!(s > 0.0)) throw ConfigError("PhantomSpec: spacing_mm must be positive");
  if (!(brain_radius_frac > 0.0) || brain_radius_frac > 0.5)
    throw ConfigError("PhantomSpec: brain_radius_frac must be in (0, 0.5]");
  check_range(timepoint_range, 2, "timepoint");
  check_range(persistent_count, 0, "persistent_count");
  check_range(new_count, 0, "new_count");
  check_range(distractor_count, 0, "distractor_count");
  check_range(lesion_radius_mm, 0.5, "lesion_radius_mm");
  check_range(persistent_contrast, 0.0, "persistent_contrast");
  check_range(new_contrast, 0.0, "new_contrast");
  check_range(distractor_contrast, 0.0, "distractor_contrast");
  if (new_contrast[0] < distractor_contrast[0] ||
      new_contrast[1] > distractor_contrast[1])
    throw ConfigError(
        "PhantomSpec: new_contrast must lie within distractor_contrast; "
        "otherwise new lesions are separable from distractors by intensity "
        "alone and the temporal signal proves nothing");
  if (new_contrast[1] >= persistent_contrast[0])
    throw ConfigError(
        "PhantomSpec: new_contrast must stay below persistent_contrast");
  if (noise_sigma < 0.0 || texture_amplitude < 0.0 || !(texture_corr_mm > 0.0))
    throw ConfigError("PhantomSpec: invalid texture/noise parameters");
  if (new_contrast[0] > 0.0 && !(new_contrast[0] > 4.0 * noise_sigma))
    throw ConfigError(
        "PhantomSpec: new_contrast floor must exceed 4x noise_sigma so the "
        "temporal difference of a new lesion clears the noise");
}

bool lesion_contains(const LesionInfo& lesion, std::array<double, 3> p_mm) {
  const double d = dist_mm(p_mm, lesion.center_mm);
  if (d > lesion.radius_mm * (1.0 + kDeformAmplitude)) return false;
  if (d < 1e-12) return true;
  const std::array<double, 3> u = {(p_mm[0] - lesion.center_mm[0]) / d,
                                   (p_mm[1] - lesion.center_mm[1]) / d,
                                   (p_mm[2] - lesion.center_mm[2]) / d};
  return d <= deformed_radius(lesion, u);
}

int PhantomTruth::placed(LesionKind kind) const {
  int n = 0;
  for (const auto& l : lesions) n += l.kind == kind ? 1 : 0;
  return n;
}

GeneratedPatient generate_patient(const PhantomSpec& spec, uint64_t patient_seed) {
  spec.validate();
  Rng anatomy(derive_seed(patient_seed, 1));

  GeneratedPatient out;
  auto& truth = out.truth;
  truth.n_timepoints = draw_count(spec.timepoint_range, anatomy);

  Brain brain;
  for (int i = 0; i < 3; ++i) {
    brain.center_mm[i] = 0.5 * (spec.dims[i] - 1) * spec.spacing_mm[i];
    brain.radii_mm[i] = spec.brain_radius_frac * spec.dims[i] *
                        spec.spacing_mm[i] * anatomy.uniform(0.9, 1.0);
  }
  const auto waves = draw_texture(spec, anatomy);

  truth.requested_persistent = draw_count(spec.persistent_count, anatomy);
  truth.requested_new = draw_count(spec.new_count, anatomy);
  truth.requested_distractors = draw_count(spec.distractor_count, anatomy);
  for (int i = 0; i < truth.requested_persistent; ++i)
    place_lesion(spec, brain, LesionKind::Persistent, spec.persistent_contrast,
                 truth.n_timepoints, anatomy, truth.lesions);
  for (int i = 0; i < truth.requested_new; ++i)
    place_lesion(spec, brain, LesionKind::New, spec.new_contrast,
                 truth.n_timepoints, anatomy, truth.lesions);
  for (int i = 0; i < truth.requested_distractors; ++i)
    place_lesion(spec, brain, LesionKind::Distractor, spec.distractor_contrast,
                 truth.n_timepoints, anatomy, truth.lesions);

  out.series.patient_id = "synthetic";
  out.series.spacing_mm = spec.spacing_mm;
  for (int t = 0; t < truth.n_timepoints; ++t) {
    Rng noise(derive_seed(patient_seed, 1000 + static_cast<uint64_t>(t)));
    Timepoint tp;
    tp.image = VolumeF(spec.dims);
    tp.mask = VolumeU8(spec.dims);
    for (int z = 0; z < spec.dims[2]; ++z)
      for (int y = 0; y < spec.dims[1]; ++y)
        for (int x = 0; x < spec.dims[0]; ++x) {
          const std::array<double, 3> p = {x * spec.spacing_mm[0],
                                           y * spec.spacing_mm[1],
                                           z * spec.spacing_mm[2]};
          if (!brain.contains(p)) continue;  // stays exactly 0 outside
          double v = 1.0 + texture_at(waves, spec.texture_amplitude, p);
          bool in_gt = false;
          for (const auto& l : truth.lesions) {
            if (t < l.onset_tp) continue;
            v += lesion_intensity(l, p);
            if (l.kind != LesionKind::Distractor && lesion_contains(l, p))
              in_gt = true;
          }
          v += spec.noise_sigma * noise.normal();
          tp.image.at(x, y, z) = static_cast<float>(v);
          tp.mask.at(x, y, z) = in_gt ? 1 : 0;
        }
    out.series.timepoints.push_back(std::move(tp));
  }
  return out;
}

std::vector<int> split_sizes(int n_patients, const std::vector<double>& fractions) {
  if (n_patients <= 0) throw ConfigError("split_sizes: n_patients must be > 0");
  if (fractions.size() != 2 && fractions.size() != 3)
    throw ConfigError("split_sizes: expected 2 (train/test) or 3 "
                      "(train/val/test) fractions");
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split_sizes: negative fraction");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split_sizes: fractions must sum to 1");
  std::vector<int> sizes;
  int assigned = 0;
  for (double f : fractions) {
    const int k = static_cast<int>(std::floor(f * n_patients + 1e-9));
    sizes.push_back(k);
    assigned += k;
  }
  sizes[0] += n_patients - assigned;  // remainder goes to train
  return sizes;
}

std::vector<std::string> split_names(size_t n_fractions) {
  if (n_fractions == 2) return {"train", "test"};
  if (n_fractions == 3) return {"train", "val", "test"};
  throw ConfigError("split_names: expected 2 or 3 splits");
}

std::vector<const ManifestPatient*> Manifest::in_split(
    const std::string& split) const {
  std::vector<const ManifestPatient*> out;
  for (const auto& p : patients)
    if (p.split == split) out.push_back(&p);
  return out;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format"] = "longidiff-manifest v1";
  j["spacing_mm"] = spacing_json(manifest.spacing_mm);
  auto& pats = j["patients"] = nlohmann::ordered_json::array();
  for (const auto& p : manifest.patients) {
    nlohmann::ordered_json jp;
    jp["id"] = p.patient_id;
    jp["split"] = p.split;
    auto& tps = jp["timepoints"] = nlohmann::ordered_json::array();
    for (const auto& tp : p.timepoints)
      tps.push_back({{"image", tp.image}, {"mask", tp.mask}});
    pats.push_back(std::move(jp));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw DataError("write failed: " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }

  const auto fail = [&](const std::string& why) -> DataError {
    return DataError("invalid manifest " + path.string() + ": " + why);
  };
  if (!j.is_object()) throw fail("top level is not an object");
  for (const auto& [key, _] : j.items())
    if (key != "format" && key != "spacing_mm" && key != "patients")
      throw fail("unknown key '" + key + "'");
  if (!j.contains("format") || !j["format"].is_string() ||
      j["format"].get<std::string>() != "longidiff-manifest v1")
    throw fail("unsupported format tag");
  if (!j.contains("spacing_mm") || !j["spacing_mm"].is_array() ||
      j["spacing_mm"].size() != 3)
    throw fail("spacing_mm must be an array of 3 numbers");

  Manifest m;
  for (int i = 0; i < 3; ++i) {
    if (!j["spacing_mm"][i].is_number()) throw fail("non-numeric spacing");
    m.spacing_mm[i] = j["spacing_mm"][i].get<double>();
    if (!(m.spacing_mm[i] > 0.0)) throw fail("non-positive spacing");
  }
  if (!j.contains("patients") || !j["patients"].is_array())
    throw fail("patients must be an array");

  std::set<std::string> seen_ids;
  for (const auto& jp : j["patients"]) {
    if (!jp.is_object()) throw fail("patient entry is not an object");
    for (const auto& [key, _] : jp.items())
      if (key != "id" && key != "split" && key != "timepoints")
        throw fail("unknown patient key '" + key + "'");
    if (!jp.contains("id") || !jp["id"].is_string() || !jp.contains("split") ||
        !jp["split"].is_string())
      throw fail("patient id and split must be strings");
    ManifestPatient p;
    p.patient_id = jp["id"].get<std::string>();
    p.split = jp["split"].get<std::string>();
    if (p.patient_id.empty()) throw fail("patient with empty id");
    if (!seen_ids.insert(p.patient_id).second)
      throw fail("duplicate patient id '" + p.patient_id + "'");
    if (p.split != "train" && p.split != "val" && p.split != "test")
      throw fail("patient '" + p.patient_id + "' has unknown split '" +
                 p.split + "'");
    if (!jp.contains("timepoints") || !jp["timepoints"].is_array() ||
        jp["timepoints"].empty())
      throw fail("patient '" + p.patient_id + "' has no timepoints");
    for (const auto& jt : jp["timepoints"]) {
      if (!jt.is_object() || !jt.contains("image") || !jt.contains("mask") ||
          !jt["image"].is_string() || !jt["mask"].is_string())
        throw fail("patient '" + p.patient_id + "' has a malformed timepoint");
      p.timepoints.push_back({jt["image"].get<std::string>(),
                              jt["mask"].get<std::string>()});
    }
    m.patients.push_back(std::move(p));
  }
  return m;
}

PatientSeries load_patient(const Manifest& manifest, const ManifestPatient& patient,
                           const std::filesystem::path& manifest_path) {
  const auto root = manifest_path.parent_path();
  PatientSeries s;
  s.patient_id = patient.patient_id;
  s.spacing_mm = manifest.spacing_mm;
  for (const auto& tp : patient.timepoints) {
    Timepoint t;
    std::array<double, 3> im_spacing, mk_spacing;
    t.image = read_volume_f32(root / tp.image, &im_spacing);
    t.mask = read_volume_u8(root / tp.mask, &mk_spacing);
    if (im_spacing != manifest.spacing_mm || mk_spacing != manifest.spacing_mm)
      throw DataError("patient " + patient.patient_id +
                      ": volume spacing disagrees with manifest");
    s.timepoints.push_back(std::move(t));
  }
  s.validate();
  return s;
}

Manifest generate_cohort(const PhantomSpec& spec, int n_patients,
                         const std::vector<double>& split_fractions, uint64_t seed,
                         const std::filesystem::path& out_dir,
                         const std::string& only_split) {
  spec.validate();
  const auto sizes = split_sizes(n_patients, split_fractions);
  const auto names = split_names(split_fractions.size());
  if (!only_split.empty() &&
      std::find(names.begin(), names.end(), only_split) == names.end())
    throw ConfigError("generate_cohort: unknown split '" + only_split + "'");

  std::filesystem::create_directories(out_dir);
  Manifest manifest;
  manifest.spacing_mm = spec.spacing_mm;

  int index = 0;
  for (size_t s = 0; s < sizes.size(); ++s) {
    for (int k = 0; k < sizes[s]; ++k, ++index) {
      char id[16];
      std::snprintf(id, sizeof(id), "p%04d", index);
      // The stream depends only on the global index, so regenerating a
      // single split reproduces its patients bit-exactly.
      const auto patient =
          generate_patient(spec, derive_seed(seed, static_cast<uint64_t>(index)));

      ManifestPatient entry;
      entry.patient_id = id;
      entry.split = names[s];
      const bool materialize = only_split.empty() || only_split == names[s];
      if (materialize) std::filesystem::create_directories(out_dir / id);
      for (int t = 0; t < patient.truth.n_timepoints; ++t) {
        const std::string image = std::string(id) + "/tp" + std::to_string(t) +
                                  "_image.vol";
        const std::string mask = std::string(id) + "/tp" + std::to_string(t) +
                                 "_mask.vol";
        if (materialize) {
          const auto& tp = patient.series.timepoints[static_cast<size_t>(t)];
          write_volume(out_dir / image, tp.image, spec.spacing_mm);
          write_volume(out_dir / mask, tp.mask, spec.spacing_mm);
        }
        entry.timepoints.push_back({image, mask});
      }
      manifest.patients.push_back(std::move(entry));
    }
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace longidiff
