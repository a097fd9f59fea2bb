#pragma once

// On-disk formats.
//
// HSIC container (cube / coded mask / measurement), all integers little-endian:
//   "HSIC" | u8 version = 1 | u8 kind | u32 H | u32 W | u32 N | f32[H*W*N]
// payload band-major. Masks and measurements carry N = 1.
//
// CSMW weights:
//   "CSMW" | u8 version = 1 | 32-byte config digest | u32 count |
//   count x { u16 name_len | name | u8 rank | u32 dims[rank] | f32[prod(dims)] }
//
// Values are stored as 32-bit floats (round to nearest even) and computed in
// double precision.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "csmamba/cassi.hpp"
#include "csmamba/denoiser.hpp"
#include "csmamba/digest.hpp"
#include "csmamba/hqs.hpp"

namespace csm::io {

/// Malformed or unreadable file; the message names the defect.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CubeKind : std::uint8_t { cube = 0, mask = 1, measurement = 2 };
std::string_view kind_name(CubeKind k);

struct CubeFile {
  CubeKind kind = CubeKind::cube;
  std::uint32_t height = 0, width = 0, bands = 0;
  std::vector<float> payload;
};

std::vector<std::uint8_t> encode_cube_file(const CubeFile& f);
CubeFile decode_cube_file(std::span<const std::uint8_t> bytes);

CubeFile read_cube_file(const std::filesystem::path& path);
void write_cube_file(const CubeFile& f, const std::filesystem::path& path);

cassi::HsiCube load_cube(const std::filesystem::path& path);
cassi::CodedMask load_mask(const std::filesystem::path& path);
cassi::Measurement load_measurement(const std::filesystem::path& path);
void save_cube(const cassi::HsiCube& cube, const std::filesystem::path& path);
void save_mask(const cassi::CodedMask& mask, const std::filesystem::path& path);
void save_measurement(const cassi::Measurement& meas, const std::filesystem::path& path);

struct WeightsFile {
  Digest config_digest{};
  net::ModelWeights weights;
};

std::vector<std::uint8_t> encode_weights(const WeightsFile& f);
WeightsFile decode_weights(std::span<const std::uint8_t> bytes);
void save_weights(const WeightsFile& f, const std::filesystem::path& path);
WeightsFile load_weights(const std::filesystem::path& path);

/// Binary PGM (P5) of one band, min-max scaled to [0, 255]; a constant band
/// maps to 128.
std::vector<std::uint8_t> band_to_pgm(const cassi::HsiCube& cube, std::size_t band);
void export_band(const cassi::HsiCube& cube, std::size_t band, const std::filesystem::path& path);

/// Loads every *.hsic cube in `dir` (sorted by file name), cropped to
/// crop x crop and truncated to the first `bands` bands. Crops are centred
/// unless `seed` is given, in which case offsets are drawn from it.
std::vector<cassi::HsiCube> ingest_dataset(const std::filesystem::path& dir, std::size_t crop,
                                           std::size_t bands,
                                           std::optional<std::uint64_t> seed = std::nullopt);

/// Network profile read from key=value configuration text.
struct Profile {
  hqs::UnfoldConfig unfold{};
  std::optional<double> mask_ratio;
  std::uint64_t mask_seed = 0;
};

/// Parses `key=value` lines; '#' starts a comment. Unknown keys and
/// malformed values throw std::invalid_argument naming the line.
Profile parse_profile(std::string_view text, Profile base = {});
Profile load_profile(const std::filesystem::path& path, Profile base = {});

/// Digest of everything that determines the weight layout.
Digest config_digest(const hqs::UnfoldConfig& cfg, std::size_t bands);

}  // namespace csm::io
