#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace longidiff {

/// Dense 3-D scalar grid. Voxels are stored x-fastest: flat index
/// (z * ny + y) * nx + x. dims = {nx, ny, nz}.
template <typename T>
struct Volume {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<T> voxels;

  Volume() = default;
  Volume(std::array<int, 3> d, T fill_value = T{})
      : dims(d), voxels(static_cast<size_t>(numel_of(d)), fill_value) {
    if (d[0] < 0 || d[1] < 0 || d[2] < 0)
      throw std::invalid_argument("Volume: negative dimension");
  }

  static int64_t numel_of(std::array<int, 3> d) {
    return static_cast<int64_t>(d[0]) * d[1] * d[2];
  }

  int64_t numel() const { return numel_of(dims); }

  int64_t index(int x, int y, int z) const {
    return (static_cast<int64_t>(z) * dims[1] + y) * dims[0] + x;
  }

  T& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  const T& at(int x, int y, int z) const { return voxels[index(x, y, z)]; }

  bool same_dims(const Volume& other) const { return dims == other.dims; }
};

using VolumeF = Volume<float>;
using VolumeU8 = Volume<uint8_t>;

std::string dims_str(std::array<int, 3> dims);

}  // namespace longidiff
