#include "regseg/raster.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace regseg::data {

static_assert(std::endian::native == std::endian::little, "RSF1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'S', 'F', '1'};
constexpr std::uint8_t kFloat32 = 0x01;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(std::string_view bytes, std::size_t offset) {
  U v;
  std::memcpy(&v, bytes.data() + offset, sizeof(U));
  return v;
}

}  // namespace

std::string encode_raster(const Grid<float>& grid) {
  if (grid.rank() < 1 || grid.rank() > kRasterMaxRank)
    throw FormatError("raster rank must be in 1.." + std::to_string(kRasterMaxRank));
  for (float v : grid.values())
    if (!std::isfinite(v)) throw FormatError("raster payload must be finite");
  std::string out;
  out.reserve(kRasterHeaderBytes + 4 * grid.shape().size() + 4 * grid.size());
  out.append(kMagic, 4);
  put<std::uint8_t>(out, kFloat32);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(grid.rank()));
  put<std::uint16_t>(out, 0);
  for (int d : grid.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.append(reinterpret_cast<const char*>(grid.data()), grid.size() * sizeof(float));
  return out;
}

Grid<float> decode_raster(std::string_view bytes) {
  if (bytes.size() < kRasterHeaderBytes) throw FormatError("truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic");
  const auto dtype = get<std::uint8_t>(bytes, 4);
  if (dtype != kFloat32) throw FormatError("unsupported dtype code " + std::to_string(dtype));
  const int rank = get<std::uint8_t>(bytes, 5);
  if (rank < 1 || rank > kRasterMaxRank) throw FormatError("bad rank " + std::to_string(rank));
  if (get<std::uint16_t>(bytes, 6) != 0) throw FormatError("reserved bytes not zero");
  const std::size_t dims_end = kRasterHeaderBytes + 4 * static_cast<std::size_t>(rank);
  if (bytes.size() < dims_end) throw FormatError("truncated dims");

  Shape shape;
  std::uint64_t product = 1;
  for (int i = 0; i < rank; ++i) {
    const auto d = get<std::uint32_t>(bytes, kRasterHeaderBytes + 4 * static_cast<std::size_t>(i));
    if (d == 0 || d > static_cast<std::uint32_t>(std::numeric_limits<int>::max()))
      throw FormatError("dim overflow: extent " + std::to_string(d));
    product *= d;
    if (product > kMaxElements) throw FormatError("dim overflow: element count too large");
    shape.push_back(static_cast<int>(d));
  }
  const std::size_t payload = static_cast<std::size_t>(product) * sizeof(float);
  if (bytes.size() < dims_end + payload) throw FormatError("truncated payload");
  if (bytes.size() > dims_end + payload) throw FormatError("trailing bytes after payload");

  std::vector<float> values(static_cast<std::size_t>(product));
  std::memcpy(values.data(), bytes.data() + dims_end, payload);
  return Grid<float>(std::move(shape), std::move(values));
}

void save_raster(const Grid<float>& grid, const std::filesystem::path& path) {
  const std::string bytes = encode_raster(grid);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Grid<float> load_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return decode_raster(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace regseg::data
