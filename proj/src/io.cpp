#include "csmamba/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>

namespace csm::io {

namespace fs = std::filesystem;

namespace {

constexpr std::uint8_t kVersion = 1;
constexpr char kCubeMagic[4] = {'H', 'S', 'I', 'C'};
constexpr char kWeightsMagic[4] = {'C', 'S', 'M', 'W'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t remaining() const { return b_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path.string() + "' failed");
}

float to_f32(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("cannot store a non-finite value");
  return static_cast<float>(v);
}

CubeFile expect_kind(CubeFile f, CubeKind want, const fs::path& path) {
  if (f.kind != want) {
    throw FormatError("kind mismatch in '" + path.string() + "': expected " +
                      std::string(kind_name(want)) + ", found " + std::string(kind_name(f.kind)));
  }
  return f;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw std::invalid_argument(std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string_view kind_name(CubeKind k) {
  switch (k) {
    case CubeKind::cube: return "cube";
    case CubeKind::mask: return "mask";
    case CubeKind::measurement: return "measurement";
  }
  return "unknown";
}

// ---- HSIC ----------------------------------------------------------------------

std::vector<std::uint8_t> encode_cube_file(const CubeFile& f) {
  if (f.height == 0 || f.width == 0 || f.bands == 0) throw std::invalid_argument("HSIC dimensions must be positive");
  if (f.kind != CubeKind::cube && f.bands != 1) {
    throw std::invalid_argument("HSIC " + std::string(kind_name(f.kind)) + " must have one band");
  }
  if (f.payload.size() != std::size_t{f.height} * f.width * f.bands) {
    throw std::invalid_argument("HSIC payload does not match its dimensions");
  }
  Writer w;
  w.bytes(kCubeMagic, 4);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(f.kind));
  w.u32(f.height);
  w.u32(f.width);
  w.u32(f.bands);
  for (float v : f.payload) w.f32(v);
  return w.take();
}

CubeFile decode_cube_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCubeMagic, 4) != 0) {
    throw FormatError("not a HSIC file");
  }
  Reader r(bytes.subspan(4));
  const std::uint8_t version = r.u8("truncated header");
  if (version != kVersion) throw FormatError("unsupported HSIC version " + std::to_string(version));
  const std::uint8_t kind = r.u8("truncated header");
  if (kind > 2) throw FormatError("invalid HSIC kind " + std::to_string(kind));
  CubeFile f;
  f.kind = static_cast<CubeKind>(kind);
  f.height = r.u32("truncated header");
  f.width = r.u32("truncated header");
  f.bands = r.u32("truncated header");
  if (f.height == 0 || f.width == 0 || f.bands == 0) throw FormatError("zero dimension in HSIC header");
  if (f.kind != CubeKind::cube && f.bands != 1) {
    throw FormatError("HSIC " + std::string(kind_name(f.kind)) + " must have one band, header says " +
                      std::to_string(f.bands));
  }
  // Checked stepwise so that huge headers cannot overflow the product.
  const std::uint64_t avail = r.remaining() / 4;
  const std::uint64_t plane = std::uint64_t{f.height} * f.width;
  if (plane > avail || f.bands > avail / plane) {
    throw FormatError("truncated payload (header declares " + std::to_string(f.height) + "x" +
                      std::to_string(f.width) + "x" + std::to_string(f.bands) + ", file holds " +
                      std::to_string(r.remaining()) + " payload bytes)");
  }
  const std::uint64_t count = plane * f.bands;
  if (r.remaining() != count * 4) throw FormatError("trailing bytes after HSIC payload");
  f.payload.resize(count);
  for (auto& v : f.payload) {
    v = r.f32("truncated payload");
    if (!std::isfinite(v)) throw FormatError("non-finite value in HSIC payload");
  }
  return f;
}

CubeFile read_cube_file(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_cube_file(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_cube_file(const CubeFile& f, const fs::path& path) { write_file(encode_cube_file(f), path); }

cassi::HsiCube load_cube(const fs::path& path) {
  const CubeFile f = expect_kind(read_cube_file(path), CubeKind::cube, path);
  cassi::HsiCube c(f.height, f.width, f.bands);
  std::copy(f.payload.begin(), f.payload.end(), c.values.begin());
  return c;
}

cassi::CodedMask load_mask(const fs::path& path) {
  const CubeFile f = expect_kind(read_cube_file(path), CubeKind::mask, path);
  cassi::CodedMask m(f.height, f.width);
  std::copy(f.payload.begin(), f.payload.end(), m.values.begin());
  return m;
}

cassi::Measurement load_measurement(const fs::path& path) {
  const CubeFile f = expect_kind(read_cube_file(path), CubeKind::measurement, path);
  cassi::Measurement m(f.height, f.width);
  std::copy(f.payload.begin(), f.payload.end(), m.values.begin());
  return m;
}

namespace {

CubeFile make_file(CubeKind kind, std::size_t h, std::size_t w, std::size_t n,
                   const std::vector<double>& values) {
  CubeFile f{kind, checked_u32(h, "height"), checked_u32(w, "width"), checked_u32(n, "bands"), {}};
  f.payload.reserve(values.size());
  for (double v : values) f.payload.push_back(to_f32(v));
  return f;
}

}  // namespace

void save_cube(const cassi::HsiCube& c, const fs::path& path) {
  write_cube_file(make_file(CubeKind::cube, c.height, c.width, c.bands, c.values), path);
}
void save_mask(const cassi::CodedMask& m, const fs::path& path) {
  write_cube_file(make_file(CubeKind::mask, m.height, m.width, 1, m.values), path);
}
void save_measurement(const cassi::Measurement& m, const fs::path& path) {
  write_cube_file(make_file(CubeKind::measurement, m.height, m.width, 1, m.values), path);
}

// ---- CSMW ----------------------------------------------------------------------

std::vector<std::uint8_t> encode_weights(const WeightsFile& f) {
  Writer w;
  w.bytes(kWeightsMagic, 4);
  w.u8(kVersion);
  w.bytes(f.config_digest.data(), f.config_digest.size());
  const auto& tensors = f.weights.tensors();
  w.u32(checked_u32(tensors.size(), "tensor count"));
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.size() > 0xFFFF) throw std::invalid_argument("tensor name length out of range");
    if (t.rank() > 0xFF) throw std::invalid_argument("tensor rank out of range");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(checked_u32(d, "tensor dimension"));
    for (double v : t.vec()) w.f32(to_f32(v));
  }
  return w.take();
}

WeightsFile decode_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0) {
    throw FormatError("not a CSMW file");
  }
  Reader r(bytes.subspan(4));
  const std::uint8_t version = r.u8("truncated weights header");
  if (version != kVersion) throw FormatError("unsupported CSMW version " + std::to_string(version));
  WeightsFile f;
  const auto digest = r.take(f.config_digest.size(), "truncated weights header");
  std::copy(digest.begin(), digest.end(), f.config_digest.begin());
  const std::uint32_t count = r.u32("truncated weights header");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint16_t len = r.u16("truncated tensor record");
    if (len == 0) throw FormatError("empty tensor name in CSMW record " + std::to_string(k));
    const auto nb = r.take(len, "truncated tensor record");
    std::string name(nb.begin(), nb.end());
    if (f.weights.contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
    const std::uint8_t rank = r.u8("truncated tensor record");
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32("truncated tensor record");
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      n *= d;
      if (n > r.remaining()) throw FormatError("truncated tensor payload for '" + name + "'");
      shape.push_back(d);
    }
    if (n > r.remaining() / 4) throw FormatError("truncated tensor payload for '" + name + "'");
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = r.f32("truncated tensor payload");
      if (!std::isfinite(v)) throw FormatError("non-finite value in tensor '" + name + "'");
      t[i] = v;
    }
    f.weights.add(name, std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after CSMW tensors");
  return f;
}

void save_weights(const WeightsFile& f, const fs::path& path) { write_file(encode_weights(f), path); }

WeightsFile load_weights(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_weights(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- PGM -----------------------------------------------------------------------

std::vector<std::uint8_t> band_to_pgm(const cassi::HsiCube& cube, std::size_t band) {
  if (band >= cube.bands) {
    throw std::out_of_range("band " + std::to_string(band) + " out of range (cube has " +
                            std::to_string(cube.bands) + " bands)");
  }
  const auto first = cube.values.begin() + static_cast<std::ptrdiff_t>(band * cube.plane());
  const auto last = first + static_cast<std::ptrdiff_t>(cube.plane());
  const auto [lo, hi] = std::minmax_element(first, last);
  const double lo_v = *lo;
  const double span = *hi - *lo;

  const std::string header = "P5\n" + std::to_string(cube.width) + " " + std::to_string(cube.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + cube.plane());
  for (auto it = first; it != last; ++it) {
    out.push_back(span > 0.0 ? static_cast<std::uint8_t>(std::lround(255.0 * (*it - lo_v) / span)) : 128);
  }
  return out;
}

void export_band(const cassi::HsiCube& cube, std::size_t band, const fs::path& path) {
  write_file(band_to_pgm(cube, band), path);
}

// ---- dataset ------------------------------------------------------------------

std::vector<cassi::HsiCube> ingest_dataset(const fs::path& dir, std::size_t crop, std::size_t bands,
                                           std::optional<std::uint64_t> seed) {
  if (crop == 0 || bands == 0) throw std::invalid_argument("crop and band count must be positive");
  if (!fs::is_directory(dir)) throw std::runtime_error("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".hsic") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  std::mt19937_64 rng(seed.value_or(0));
  std::vector<cassi::HsiCube> out;
  for (const fs::path& p : files) {
    const cassi::HsiCube src = load_cube(p);
    if (src.height < crop || src.width < crop) {
      throw std::invalid_argument("scene '" + p.filename().string() + "' (" + std::to_string(src.height) +
                                  "x" + std::to_string(src.width) + ") is smaller than crop " +
                                  std::to_string(crop));
    }
    if (src.bands < bands) {
      throw std::invalid_argument("scene '" + p.filename().string() + "' has " + std::to_string(src.bands) +
                                  " bands, " + std::to_string(bands) + " requested");
    }
    std::size_t r0 = (src.height - crop) / 2;
    std::size_t x0 = (src.width - crop) / 2;
    if (seed) {
      r0 = std::uniform_int_distribution<std::size_t>(0, src.height - crop)(rng);
      x0 = std::uniform_int_distribution<std::size_t>(0, src.width - crop)(rng);
    }
    cassi::HsiCube c(crop, crop, bands);
    for (std::size_t b = 0; b < bands; ++b) {
      for (std::size_t r = 0; r < crop; ++r) {
        for (std::size_t x = 0; x < crop; ++x) c.at(b, r, x) = src.at(b, r0 + r, x0 + x);
      }
    }
    out.push_back(std::move(c));
  }
  if (out.empty()) throw std::runtime_error("no .hsic scenes found in '" + dir.string() + "'");
  return out;
}

// ---- profiles -------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v, const std::string& where) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument(where + ": malformed value '" + std::string(v) + "'");
  }
  return out;
}

std::size_t parse_positive(std::string_view v, const std::string& where) {
  const auto n = parse_number<std::size_t>(v, where);
  if (n == 0) throw std::invalid_argument(where + ": value must be positive");
  return n;
}

bool parse_bool(std::string_view v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(where + ": expected true/false, got '" + std::string(v) + "'");
}

}  // namespace

Profile parse_profile(std::string_view text, Profile p) {
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument(where + ": expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view val = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw std::invalid_argument(where + ": duplicate key '" + key + "'");
    auto& d = p.unfold.denoiser;
    if (key == "stages") {
      p.unfold.stages = parse_number<std::size_t>(val, where);
    } else if (key == "base_channels") {
      d.base_channels = parse_positive(val, where);
    } else if (key == "patch") {
      d.patch = parse_positive(val, where);
      d.cube.patch = d.patch;
    } else if (key == "cube") {
      const auto x1 = val.find('x');
      const auto x2 = x1 == std::string_view::npos ? x1 : val.find('x', x1 + 1);
      if (x2 == std::string_view::npos) throw std::invalid_argument(where + ": cube must be hxwxc");
      d.cube.h = parse_positive(val.substr(0, x1), where);
      d.cube.w = parse_positive(val.substr(x1 + 1, x2 - x1 - 1), where);
      d.cube.c = parse_positive(val.substr(x2 + 1), where);
    } else if (key == "state_size") {
      d.state = parse_positive(val, where);
    } else if (key == "levels") {
      d.levels = parse_number<std::size_t>(val, where);
    } else if (key == "blocks_per_level") {
      d.blocks_per_level = parse_number<std::size_t>(val, where);
    } else if (key == "bottleneck_blocks") {
      d.bottleneck_blocks = parse_number<std::size_t>(val, where);
    } else if (key == "ffn_expand") {
      d.ffn_expand = parse_positive(val, where);
    } else if (key == "mask_ratio") {
      const double r = parse_number<double>(val, where);
      if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument(where + ": mask_ratio must lie in [0, 1)");
      p.mask_ratio = r;
    } else if (key == "mask_seed") {
      p.mask_seed = parse_number<std::uint64_t>(val, where);
    } else if (key == "share_weights") {
      p.unfold.share_weights = parse_bool(val, where);
    } else {
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
  }
  return p;
}

Profile load_profile(const fs::path& path, Profile base) {
  const auto bytes = read_file(path);
  return parse_profile(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), base);
}

Digest config_digest(const hqs::UnfoldConfig& cfg, std::size_t bands) {
  const auto& d = cfg.denoiser;
  std::ostringstream s;
  s << "stages=" << cfg.stages << ";share_weights=" << cfg.share_weights << ";levels=" << d.levels
    << ";blocks_per_level=" << d.blocks_per_level << ";bottleneck_blocks=" << d.bottleneck_blocks
    << ";base_channels=" << d.base_channels << ";patch=" << d.patch << ";cube=" << d.cube.h << "x"
    << d.cube.w << "x" << d.cube.c << ";state_size=" << d.state << ";ffn_expand=" << d.ffn_expand
    << ";bands=" << bands;
  return sha256(s.str());
}

}  // namespace csm::io
