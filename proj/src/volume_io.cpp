#include "longidiff/volume_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "longidiff/errors.hpp"

namespace longidiff {

namespace {

constexpr const char* kMagic = "longidiff-volume v1";

void store_le32(uint32_t v, unsigned char* out) {
  out[0] = static_cast<unsigned char>(v);
  out[1] = static_cast<unsigned char>(v >> 8);
  out[2] = static_cast<unsigned char>(v >> 16);
  out[3] = static_cast<unsigned char>(v >> 24);
}

uint32_t load_le32(const unsigned char* in) {
  return static_cast<uint32_t>(in[0]) | static_cast<uint32_t>(in[1]) << 8 |
         static_cast<uint32_t>(in[2]) << 16 | static_cast<uint32_t>(in[3]) << 24;
}

std::vector<char> f32_payload(const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(bytes.data(), values.data(), bytes.size());
  } else {
    for (size_t i = 0; i < values.size(); ++i) {
      uint32_t u;
      std::memcpy(&u, &values[i], 4);
      store_le32(u, reinterpret_cast<unsigned char*>(bytes.data()) + 4 * i);
    }
  }
  return bytes;
}

std::vector<float> f32_from_payload(const std::vector<char>& bytes) {
  std::vector<float> values(bytes.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), bytes.data(), bytes.size());
  } else {
    for (size_t i = 0; i < values.size(); ++i) {
      uint32_t u = load_le32(reinterpret_cast<const unsigned char*>(bytes.data()) + 4 * i);
      std::memcpy(&values[i], &u, 4);
    }
  }
  return values;
}

void write_file(const std::filesystem::path& path, std::array<int, 3> dims,
                std::array<double, 3> spacing, const char* dtype,
                const char* payload, size_t nbytes) {
  std::ostringstream header;
  header << kMagic << "\n";
  header << "dims " << dims[0] << " " << dims[1] << " " << dims[2] << "\n";
  header << "spacing_mm " << format_double(spacing[0]) << " "
         << format_double(spacing[1]) << " " << format_double(spacing[2]) << "\n";
  header << "dtype " << dtype << "\n";
  header << "order x-fastest\n";
  header << "data " << nbytes << "\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload, static_cast<std::streamsize>(nbytes));
  if (!out) throw DataError("write failed: " + path.string());
}

std::string read_line(std::istream& in, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line))
    throw DataError("unexpected end of header: " + path.string());
  return line;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string dims_str(std::array<int, 3> dims) {
  std::ostringstream s;
  s << dims[0] << "x" << dims[1] << "x" << dims[2];
  return s.str();
}

void write_volume(const std::filesystem::path& path, const VolumeF& v,
                  std::array<double, 3> spacing_mm) {
  auto bytes = f32_payload(v.voxels);
  write_file(path, v.dims, spacing_mm, "f32", bytes.data(), bytes.size());
}

void write_volume(const std::filesystem::path& path, const VolumeU8& v,
                  std::array<double, 3> spacing_mm) {
  write_file(path, v.dims, spacing_mm, "u8",
             reinterpret_cast<const char*>(v.voxels.data()), v.voxels.size());
}

VolumePayload read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open volume file: " + path.string());

  if (read_line(in, path) != kMagic)
    throw DataError("bad magic line in volume file: " + path.string());

  std::array<int, 3> dims{};
  {
    std::istringstream ls(read_line(in, path));
    std::string key;
    ls >> key >> dims[0] >> dims[1] >> dims[2];
    if (key != "dims" || !ls || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw DataError("bad dims line in volume file: " + path.string());
  }
  std::array<double, 3> spacing{};
  {
    std::istringstream ls(read_line(in, path));
    std::string key;
    ls >> key >> spacing[0] >> spacing[1] >> spacing[2];
    if (key != "spacing_mm" || !ls || spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
      throw DataError("bad spacing_mm line in volume file: " + path.string());
  }
  std::string dtype;
  {
    std::istringstream ls(read_line(in, path));
    std::string key;
    ls >> key >> dtype;
    if (key != "dtype" || (dtype != "f32" && dtype != "u8"))
      throw DataError("bad dtype line in volume file: " + path.string());
  }
  if (read_line(in, path) != "order x-fastest")
    throw DataError("bad order line in volume file: " + path.string());

  size_t nbytes = 0;
  {
    std::istringstream ls(read_line(in, path));
    std::string key;
    ls >> key >> nbytes;
    if (key != "data" || !ls)
      throw DataError("bad data line in volume file: " + path.string());
  }

  const int64_t numel = Volume<char>::numel_of(dims);
  const size_t esize = dtype == "f32" ? 4 : 1;
  if (nbytes != static_cast<size_t>(numel) * esize)
    throw DataError("payload size does not match dims in volume file: " + path.string());

  std::vector<char> bytes(nbytes);
  in.read(bytes.data(), static_cast<std::streamsize>(nbytes));
  if (static_cast<size_t>(in.gcount()) != nbytes)
    throw DataError("truncated payload in volume file: " + path.string());
  if (in.peek() != std::char_traits<char>::eof())
    throw DataError("trailing bytes after payload in volume file: " + path.string());

  VolumePayload result;
  result.spacing_mm = spacing;
  if (dtype == "f32") {
    VolumeF v;
    v.dims = dims;
    v.voxels = f32_from_payload(bytes);
    result.data = std::move(v);
  } else {
    VolumeU8 v;
    v.dims = dims;
    v.voxels.assign(bytes.begin(), bytes.end());
    result.data = std::move(v);
  }
  return result;
}

VolumeF read_volume_f32(const std::filesystem::path& path,
                        std::array<double, 3>* spacing_mm) {
  VolumePayload p = read_volume(path);
  if (p.is_u8()) throw DataError("expected f32 volume: " + path.string());
  if (spacing_mm) *spacing_mm = p.spacing_mm;
  return std::move(std::get<VolumeF>(p.data));
}

VolumeU8 read_volume_u8(const std::filesystem::path& path,
                        std::array<double, 3>* spacing_mm) {
  VolumePayload p = read_volume(path);
  if (!p.is_u8()) throw DataError("expected u8 volume: " + path.string());
  if (spacing_mm) *spacing_mm = p.spacing_mm;
  return std::move(std::get<VolumeU8>(p.data));
}

}  // namespace longidiff
