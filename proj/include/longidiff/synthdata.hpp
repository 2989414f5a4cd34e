#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "longidiff/preprocess.hpp"
#include "longidiff/rng.hpp"

namespace longidiff {

/// Parameters of the longitudinal phantom. A patient is a smooth "brain"
/// ellipsoid (zero outside) with static correlated texture, carrying three
/// blob populations:
///   persistent  - bright, in the ground truth of every timepoint
///   new         - faint, appear at a random onset timepoint >= 1
///   distractor  - faint, identical in all timepoints, never ground truth
/// New lesions and distractors share one contrast range, so a single image
/// cannot tell them apart; only the difference against the prior image can.
/// Default counts skew toward the faint kinds so that most of the ground
/// truth is only recoverable through the prior image.
struct PhantomSpec {
  std::array<int, 3> dims{48, 48, 48};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  double brain_radius_frac = 0.42;
  std::array<int, 2> timepoint_range{2, 4};
  std::array<int, 2> persistent_count{1, 2};
  std::array<int, 2> new_count{3, 5};
  std::array<int, 2> distractor_count{3, 5};
  std::array<double, 2> lesion_radius_mm{2.0, 3.5};
  std::array<double, 2> persistent_contrast{0.8, 1.2};
  std::array<double, 2> new_contrast{0.25, 0.45};
  std::array<double, 2> distractor_contrast{0.25, 0.45};
  double texture_amplitude = 0.1;
  double texture_corr_mm = 8.0;
  double noise_sigma = 0.05;

  /// Throws ConfigError on empty/inverted ranges, non-positive geometry, or
  /// a new-lesion contrast range that escapes the distractor range (which
  /// would make new lesions separable by intensity alone).
  void validate() const;
};

enum class LesionKind { Persistent, New, Distractor };

/// Everything needed to re-rasterize one blob: the shape is a sphere of
/// radius_mm whose surface is radially displaced by a quadratic form in the
/// unit direction (coefficients in deform, displacement <= 25% of radius).
struct LesionInfo {
  LesionKind kind = LesionKind::Persistent;
  std::array<double, 3> center_mm{0, 0, 0};
  double radius_mm = 0.0;
  double contrast = 0.0;
  /// First timepoint at which the lesion exists. 0 except for New lesions.
  int onset_tp = 0;
  /// Unit-norm quadratic-form coefficients over
  /// (ux^2, uy^2, uz^2, ux*uy, ux*uz, uy*uz).
  std::array<double, 6> deform{0, 0, 0, 0, 0, 0};
};

/// True iff the point lies inside the lesion's ground-truth region.
bool lesion_contains(const LesionInfo& lesion, std::array<double, 3> p_mm);

struct PhantomTruth {
  int n_timepoints = 0;
  std::vector<LesionInfo> lesions;
  /// Requested blob counts; fewer may have been placed when the bounded
  /// rejection sampling could not fit a blob (small brains, many blobs).
  int requested_persistent = 0;
  int requested_new = 0;
  int requested_distractors = 0;
  int placed(LesionKind kind) const;
};

struct GeneratedPatient {
  PatientSeries series;
  PhantomTruth truth;
};

/// Pure function of (spec, patient_seed): same arguments, bit-identical
/// series. Draws the timepoint count, anatomy, and blobs from one derived
/// stream and per-timepoint noise from independent streams.
GeneratedPatient generate_patient(const PhantomSpec& spec, uint64_t patient_seed);

/// floor(fraction * n) per split, remainder added to the first (train)
/// split. fractions must have 2 (train/test) or 3 (train/val/test) entries
/// summing to 1.
std::vector<int> split_sizes(int n_patients, const std::vector<double>& fractions);

/// Names for the split slots of split_sizes, in order.
std::vector<std::string> split_names(size_t n_fractions);

struct ManifestTimepoint {
  std::string image;  // path relative to the manifest directory
  std::string mask;
};

struct ManifestPatient {
  std::string patient_id;
  std::string split;
  std::vector<ManifestTimepoint> timepoints;
};

struct Manifest {
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<ManifestPatient> patients;

  std::vector<const ManifestPatient*> in_split(const std::string& split) const;
};

void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Throws DataError on malformed JSON, unknown format tag, duplicate patient
/// ids, or a patient with no timepoints.
Manifest read_manifest(const std::filesystem::path& path);

/// Reads the patient's volumes relative to the manifest's directory and
/// validates the assembled series.
PatientSeries load_patient(const Manifest& manifest, const ManifestPatient& patient,
                           const std::filesystem::path& manifest_path);

/// Generates n_patients phantoms into out_dir (one subdirectory per patient)
/// plus out_dir/manifest.json. Patient i always derives its rng stream from
/// (seed, i) regardless of which splits are materialized, so restricting
/// only_split to e.g. "test" writes byte-identical test volumes without
/// touching train. only_split empty = all splits.
Manifest generate_cohort(const PhantomSpec& spec, int n_patients,
                         const std::vector<double>& split_fractions, uint64_t seed,
                         const std::filesystem::path& out_dir,
                         const std::string& only_split = "");

}  // namespace longidiff
