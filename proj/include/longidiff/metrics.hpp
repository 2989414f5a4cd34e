#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "longidiff/volume.hpp"

namespace longidiff {

/// One maximal connected foreground region. Labels are 1-based and ordered
/// by each component's first voxel in raster (x-fastest) order, so labeling
/// is deterministic.
struct LesionComponent {
  int label = 0;
  std::vector<int64_t> voxels;  // flat indices, ascending
  double volume_mm3 = 0.0;
};

/// Two-pass union-find labeling. connectivity is 6 (faces) or 26 (faces,
/// edges, corners); any nonzero voxel is foreground.
std::vector<LesionComponent> connected_components(const VolumeU8& mask,
                                                  std::array<double, 3> spacing_mm,
                                                  int connectivity = 26);

/// Removes components with volume strictly below min_mm3 (a 3-voxel lesion
/// at 1 mm isotropic spacing is exactly 3 mm3 and is kept). enabled=false
/// returns the mask unchanged, which is the unfiltered evaluation mode.
VolumeU8 filter_small_lesions(const VolumeU8& mask, std::array<double, 3> spacing_mm,
                              double min_mm3 = 3.0, bool enabled = true);

/// 2|A.B| / (|A|+|B|). Both masks empty -> 1.0; exactly one empty -> 0.0.
double dice(const VolumeU8& gt, const VolumeU8& pred);

/// 95th percentile (linear interpolation) of the pooled bidirectional
/// surface distances in mm. Surface voxels are foreground voxels with a
/// face-adjacent background or volume-border neighbor. Returns nullopt when
/// either mask is empty; such scans are excluded from averages but counted.
std::optional<double> hd95(const VolumeU8& gt, const VolumeU8& pred,
                           std::array<double, 3> spacing_mm);

struct LesionMatchResult {
  double f1 = 0.0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<std::pair<int, int>> matches;  // (gt label, pred label)
};

/// One-to-one greedy matching: candidate (gt, pred) pairs with IoU >=
/// iou_threshold are taken in IoU-descending order (ties by gt label, then
/// pred label), each component matched at most once. F1 = 2TP/(2TP+FP+FN);
/// no lesions on either side -> 1.0; lesions on exactly one side -> 0.0.
LesionMatchResult lesion_f1(const std::vector<LesionComponent>& gt,
                            const std::vector<LesionComponent>& pred,
                            double iou_threshold = 0.1);

struct ScanMetrics {
  std::string patient_id;
  int timepoint = 0;
  double dsc = 0.0;
  std::optional<double> hd95_mm;
  double f1 = 0.0;
  int tp_lesions = 0;
  int fp_lesions = 0;
  int fn_lesions = 0;
  int gt_lesions = 0;    // component counts after filtering
  int pred_lesions = 0;
};

/// Size-filters both masks, then computes all scan-level metrics. The
/// caller fills patient_id and timepoint.
ScanMetrics evaluate_scan(const VolumeU8& gt, const VolumeU8& pred,
                          std::array<double, 3> spacing_mm,
                          double iou_threshold = 0.1, double min_lesion_mm3 = 3.0,
                          bool size_filter = true);

struct PatientSummary {
  std::string patient_id;
  int n_scans = 0;
  double dsc = 0.0;
  double f1 = 0.0;
  /// Mean over this patient's scans with a defined HD95; nullopt when all
  /// of them were undefined.
  std::optional<double> hd95_mm;
};

/// Cohort values are unweighted means over patients of unweighted means
/// over each patient's scans: a patient with many scans counts once.
struct CohortReport {
  std::vector<ScanMetrics> scans;
  std::vector<PatientSummary> patients;
  double dsc = 0.0;
  double f1 = 0.0;
  std::optional<double> hd95_mm;
  int hd95_patients = 0;  // patients contributing to the cohort HD95 mean
};

CohortReport aggregate(const std::vector<ScanMetrics>& scans);

/// Deterministic machine-readable report (JSON text, byte-stable across
/// runs) with cohort, per-patient, and per-scan records.
std::string report_to_json(const CohortReport& report);

/// Human-readable table with one row per patient plus the cohort row,
/// columns DSC / HD95 / F1.
std::string render_report_table(const CohortReport& report);

}  // namespace longidiff
