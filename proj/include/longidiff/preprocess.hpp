#pragma once

#include <array>
#include <string>
#include <vector>

#include "longidiff/rng.hpp"
#include "longidiff/volume.hpp"

namespace longidiff {

struct Timepoint {
  VolumeF image;
  VolumeU8 mask;
};

/// One co-registered longitudinal series: ordered timepoints sharing shape
/// and spacing, each with a binary ground-truth lesion mask.
struct PatientSeries {
  std::string patient_id;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<Timepoint> timepoints;

  /// Throws DataError unless there are >= 2 timepoints, all volumes share
  /// one shape, spacing is positive, and masks are strictly {0,1}.
  void validate() const;
};

/// Inclusive axis-aligned voxel box.
struct BBox {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> hi{-1, -1, -1};
  std::array<int, 3> size() const {
    return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  }
};

struct CropResult {
  PatientSeries series;
  BBox bbox;
  /// Ground-truth voxels that fell outside the joint image box and were
  /// discarded. Callers surface this as a warning; synthetic data keeps
  /// lesions inside the brain so a nonzero count indicates a data problem.
  int64_t mask_voxels_lost = 0;
};

/// Crop every timepoint to the minimal box containing all nonzero IMAGE
/// voxels of all timepoints (one shared box, so temporal voxel alignment is
/// preserved). Throws DataError when the union of images is identically 0.
CropResult crop_to_joint_bbox(const PatientSeries& series);

/// (v - mean) / max(std, 1e-8) over all voxels, population std.
VolumeF zscore_normalize(const VolumeF& v);

/// Copy of the window [lo, lo+size) with out-of-range voxels zero-filled
/// (zero is the post-normalization background mean).
VolumeF extract_window(const VolumeF& v, std::array<int, 3> lo,
                       std::array<int, 3> size);
VolumeU8 extract_window(const VolumeU8& v, std::array<int, 3> lo,
                        std::array<int, 3> size);

/// The full preprocessing chain for one series: joint bbox crop, then
/// per-image z-score normalization. mask_voxels_lost (when given) receives
/// the count of ground-truth voxels discarded by the crop.
PatientSeries preprocess_series(const PatientSeries& series,
                                int64_t* mask_voxels_lost = nullptr);

/// Temporal ordering of a sampled pair: Forward predicts the later scan of
/// an adjacent pair from the earlier one; Backward predicts the earlier scan
/// from its follow-up (how baseline scans get a "prior" at all).
enum class Direction { Forward, Backward };

struct PatchPair {
  VolumeF current;
  VolumeF prior;
  VolumeU8 target;
  /// Center voxel of the window in volume coordinates.
  std::array<int, 3> center{0, 0, 0};
  int current_tp = 0;
  int prior_tp = 0;
};

/// Cut one training example from a (cropped, normalized) series: an adjacent
/// timepoint pair is drawn uniformly, ordered per `direction`, and a window
/// of `patch_size` is cut at identical coordinates from both images and the
/// current mask. With probability fg_prob the window is centered on a
/// uniformly chosen foreground voxel of the current mask (uniform voxel when
/// the mask is empty); otherwise on a uniform voxel. Out-of-range parts are
/// zero-padded (zero is the post-normalization background mean).
PatchPair sample_patch_pair(const PatientSeries& series, Direction direction,
                            std::array<int, 3> patch_size, double fg_prob, Rng& rng);

}  // namespace longidiff
