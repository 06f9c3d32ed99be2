#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "regseg/grid.hpp"

namespace regseg::data {

/// RSF1 layout (all little endian):
///   0..3   magic "RSF1"
///   4      dtype code, 0x01 = float32
///   5      rank r (1..8)
///   6..7   reserved, zero
///   8..    r x u32 dims, then the row-major float32 payload
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kRasterHeaderBytes = 8;
inline constexpr int kRasterMaxRank = 8;

std::string encode_raster(const Grid<float>& grid);
/// Throws FormatError ("bad magic", "truncated payload", "dim overflow", ...).
Grid<float> decode_raster(std::string_view bytes);

void save_raster(const Grid<float>& grid, const std::filesystem::path& path);
Grid<float> load_raster(const std::filesystem::path& path);

}  // namespace regseg::data
