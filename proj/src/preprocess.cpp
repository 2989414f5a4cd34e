#include "longidiff/preprocess.hpp"

#include <cmath>
#include <stdexcept>

#include "longidiff/errors.hpp"

namespace longidiff {

void PatientSeries::validate() const {
  if (timepoints.size() < 2)
    throw DataError("patient " + patient_id + ": needs >= 2 timepoints, has " +
                    std::to_string(timepoints.size()));
  for (double s : spacing_mm)
    if (!(s > 0.0)) throw DataError("patient " + patient_id + ": non-positive spacing");
  const auto dims = timepoints.front().image.dims;
  for (size_t t = 0; t < timepoints.size(); ++t) {
    const auto& tp = timepoints[t];
    if (tp.image.dims != dims || tp.mask.dims != dims)
      throw DataError("patient " + patient_id + ": timepoint " + std::to_string(t) +
                      " volume shape differs");
    if (tp.image.numel() != static_cast<int64_t>(tp.image.voxels.size()) ||
        tp.mask.numel() != static_cast<int64_t>(tp.mask.voxels.size()))
      throw DataError("patient " + patient_id + ": voxel count mismatch");
    for (uint8_t v : tp.mask.voxels)
      if (v > 1)
        throw DataError("patient " + patient_id + ": mask is not binary (value " +
                        std::to_string(int(v)) + ")");
  }
}

CropResult crop_to_joint_bbox(const PatientSeries& series) {
  series.validate();
  const auto dims = series.timepoints.front().image.dims;
  BBox box;
  box.lo = {dims[0], dims[1], dims[2]};
  box.hi = {-1, -1, -1};
  for (const auto& tp : series.timepoints) {
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          if (tp.image.at(x, y, z) == 0.0f) continue;
          box.lo = {std::min(box.lo[0], x), std::min(box.lo[1], y), std::min(box.lo[2], z)};
          box.hi = {std::max(box.hi[0], x), std::max(box.hi[1], y), std::max(box.hi[2], z)};
        }
  }
  if (box.hi[0] < box.lo[0])
    throw DataError("patient " + series.patient_id +
                    ": cannot crop, all timepoint images are zero");

  const auto size = box.size();
  CropResult result;
  result.bbox = box;
  result.series.patient_id = series.patient_id;
  result.series.spacing_mm = series.spacing_mm;
  for (const auto& tp : series.timepoints) {
    Timepoint out;
    out.image = VolumeF(size);
    out.mask = VolumeU8(size);
    for (int z = 0; z < size[2]; ++z)
      for (int y = 0; y < size[1]; ++y)
        for (int x = 0; x < size[0]; ++x) {
          out.image.at(x, y, z) = tp.image.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
          out.mask.at(x, y, z) = tp.mask.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
        }
    int64_t inside = 0;
    for (uint8_t v : out.mask.voxels) inside += v;
    int64_t total = 0;
    for (uint8_t v : tp.mask.voxels) total += v;
    result.mask_voxels_lost += total - inside;
    result.series.timepoints.push_back(std::move(out));
  }
  return result;
}

VolumeF zscore_normalize(const VolumeF& v) {
  if (v.numel() == 0) throw DataError("zscore_normalize: empty volume");
  double sum = 0.0;
  for (float x : v.voxels) sum += x;
  const double mean = sum / static_cast<double>(v.numel());
  double sq = 0.0;
  for (float x : v.voxels) {
    const double c = x - mean;
    sq += c * c;
  }
  const double std_dev = std::sqrt(sq / static_cast<double>(v.numel()));
  const double inv = 1.0 / std::max(std_dev, 1e-8);
  VolumeF out(v.dims);
  for (size_t i = 0; i < v.voxels.size(); ++i)
    out.voxels[i] = static_cast<float>((v.voxels[i] - mean) * inv);
  return out;
}

namespace {

template <typename T>
Volume<T> cut_window(const Volume<T>& v, std::array<int, 3> lo,
                     std::array<int, 3> size) {
  Volume<T> out(size, T{});
  for (int z = 0; z < size[2]; ++z) {
    const int sz = lo[2] + z;
    if (sz < 0 || sz >= v.dims[2]) continue;
    for (int y = 0; y < size[1]; ++y) {
      const int sy = lo[1] + y;
      if (sy < 0 || sy >= v.dims[1]) continue;
      for (int x = 0; x < size[0]; ++x) {
        const int sx = lo[0] + x;
        if (sx < 0 || sx >= v.dims[0]) continue;
        out.at(x, y, z) = v.at(sx, sy, sz);
      }
    }
  }
  return out;
}

}  // namespace

VolumeF extract_window(const VolumeF& v, std::array<int, 3> lo,
                       std::array<int, 3> size) {
  return cut_window(v, lo, size);
}

VolumeU8 extract_window(const VolumeU8& v, std::array<int, 3> lo,
                        std::array<int, 3> size) {
  return cut_window(v, lo, size);
}

PatientSeries preprocess_series(const PatientSeries& series,
                                int64_t* mask_voxels_lost) {
  auto crop = crop_to_joint_bbox(series);
  if (mask_voxels_lost) *mask_voxels_lost = crop.mask_voxels_lost;
  for (auto& tp : crop.series.timepoints) tp.image = zscore_normalize(tp.image);
  return std::move(crop.series);
}

PatchPair sample_patch_pair(const PatientSeries& series, Direction direction,
                            std::array<int, 3> patch_size, double fg_prob, Rng& rng) {
  series.validate();
  for (int s : patch_size)
    if (s < 1) throw std::invalid_argument("sample_patch_pair: patch extents must be >= 1");
  if (fg_prob < 0.0 || fg_prob > 1.0)
    throw std::invalid_argument("sample_patch_pair: fg_prob must be in [0,1]");

  const int n_tp = static_cast<int>(series.timepoints.size());
  const int earlier = static_cast<int>(rng.uniform_int(0, n_tp - 2));
  PatchPair pair;
  if (direction == Direction::Forward) {
    pair.prior_tp = earlier;
    pair.current_tp = earlier + 1;
  } else {
    pair.prior_tp = earlier + 1;
    pair.current_tp = earlier;
  }

  const auto& cur = series.timepoints[static_cast<size_t>(pair.current_tp)];
  const auto dims = cur.image.dims;

  bool centered_on_fg = rng.uniform() < fg_prob;
  if (centered_on_fg) {
    std::vector<int64_t> fg;
    for (size_t i = 0; i < cur.mask.voxels.size(); ++i)
      if (cur.mask.voxels[i]) fg.push_back(static_cast<int64_t>(i));
    if (fg.empty()) {
      centered_on_fg = false;
    } else {
      const int64_t flat = fg[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(fg.size()) - 1))];
      pair.center = {static_cast<int>(flat % dims[0]),
                     static_cast<int>(flat / dims[0] % dims[1]),
                     static_cast<int>(flat / dims[0] / dims[1])};
    }
  }
  if (!centered_on_fg) {
    pair.center = {static_cast<int>(rng.uniform_int(0, dims[0] - 1)),
                   static_cast<int>(rng.uniform_int(0, dims[1] - 1)),
                   static_cast<int>(rng.uniform_int(0, dims[2] - 1))};
  }

  const std::array<int, 3> lo = {pair.center[0] - patch_size[0] / 2,
                                 pair.center[1] - patch_size[1] / 2,
                                 pair.center[2] - patch_size[2] / 2};
  const auto& pri = series.timepoints[static_cast<size_t>(pair.prior_tp)];
  pair.current = cut_window(cur.image, lo, patch_size);
  pair.prior = cut_window(pri.image, lo, patch_size);
  pair.target = cut_window(cur.mask, lo, patch_size);
  return pair;
}

}  // namespace longidiff
