#pragma once

#include <array>
#include <filesystem>
#include <variant>

#include "longidiff/volume.hpp"

namespace longidiff {

/// Contents of one volume file: a float image or an 8-bit mask plus its
/// voxel spacing. The on-disk layout is documented in docs/format.md.
struct VolumePayload {
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::variant<VolumeF, VolumeU8> data;

  bool is_u8() const { return std::holds_alternative<VolumeU8>(data); }
  const VolumeF& f32() const { return std::get<VolumeF>(data); }
  const VolumeU8& u8() const { return std::get<VolumeU8>(data); }
};

void write_volume(const std::filesystem::path& path, const VolumeF& v,
                  std::array<double, 3> spacing_mm);
void write_volume(const std::filesystem::path& path, const VolumeU8& v,
                  std::array<double, 3> spacing_mm);

/// Throws DataError on missing file, bad header, dtype/length mismatch,
/// truncated payload, or trailing bytes.
VolumePayload read_volume(const std::filesystem::path& path);

/// Typed readers; throw DataError when the file holds the other dtype.
VolumeF read_volume_f32(const std::filesystem::path& path,
                        std::array<double, 3>* spacing_mm = nullptr);
VolumeU8 read_volume_u8(const std::filesystem::path& path,
                        std::array<double, 3>* spacing_mm = nullptr);

/// Shortest decimal representation that parses back to the identical double.
/// Used everywhere a float enters a text header so round-trips stay exact.
std::string format_double(double v);

}  // namespace longidiff
