#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lookwhere/rng.hpp"
#include "lookwhere/tensor.hpp"

namespace lookwhere {

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

enum class TaskKind { kClassification, kSegmentation };

struct SyntheticSpec {
  int image_side = 64;
  int num_classes = 4;
  int glyph_side = 12;
  double noise_std = 0.25;
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::kClassification;
  int patch_size = 8;      // granularity of the per-patch mask
  int position_stride = 1;  // glyph anchors land on this lattice
  int noise_block = 1;      // side of constant-noise blocks (1 = per-pixel)

  double salient_fraction() const {
    return double(glyph_side) * double(glyph_side) /
           (double(image_side) * double(image_side));
  }

  void validate() const {
    if (image_side <= 0) throw ValueError("synthetic: image_side must be positive");
    if (glyph_side < 4)
      throw ValueError("synthetic: glyph_side must be at least 4 (ring plus texture)");
    if (glyph_side >= image_side)
      throw ValueError("synthetic: glyph_side must be smaller than image_side");
    if (num_classes < 1) throw ValueError("synthetic: num_classes must be at least 1");
    if (noise_std < 0.0) throw ValueError("synthetic: noise_std must be non-negative");
    if (patch_size <= 0 || image_side % patch_size != 0)
      throw ValueError("synthetic: patch_size must divide image_side");
    if (position_stride < 1)
      throw ValueError("synthetic: position_stride must be at least 1");
    if (noise_block < 1) throw ValueError("synthetic: noise_block must be at least 1");
    if (salient_fraction() >= 0.2)
      throw ValueError("synthetic: salient fraction must stay below 0.2");
    int tiles = (glyph_side - 2) / 2;
    int id_tiles = std::min(8, tiles * tiles);
    if (num_classes > (1 << id_tiles))
      throw ValueError("synthetic: too many classes for this glyph size");
  }
};

struct Sample {
  Tensor image;                   // [side, side, 1]
  int label = 0;
  std::vector<int> patch_labels;  // [grid*grid]; 0 = background, label+1 on the glyph
  int glyph_row = 0;
  int glyph_col = 0;
};

// Class bitmap: a one-pixel bright ring around an interior tiled with 2x2
// cells. Each tile is either diagonal (on at (0,0) and (1,1)) or
// anti-diagonal; the first eight tiles spell the class index bit by bit and
// the rest follow a class-seeded codeword. Every tile holds exactly two on
// pixels, so classes share their coarse brightness profile and differ only
// in fine-grained orientation.
inline std::vector<double> glyph_bitmap(int side, int cls) {
  if (side < 4) throw ValueError("glyph_bitmap: side must be at least 4");
  if (cls < 0) throw ValueError("glyph_bitmap: class index must be non-negative");
  std::vector<double> bmp(std::size_t(side) * side, 0.0);
  auto at = [&](int r, int c) -> double& { return bmp[std::size_t(r) * side + c]; };
  for (int i = 0; i < side; ++i) {
    at(0, i) = 1.0;
    at(side - 1, i) = 1.0;
    at(i, 0) = 1.0;
    at(i, side - 1) = 1.0;
  }
  const int inner = side - 2;
  const int tiles = inner / 2;
  // Leftover strip when the interior side is odd: extend the ring.
  for (int r = 1; r <= inner; ++r)
    for (int c = 1; c <= inner; ++c)
      if (r - 1 >= 2 * tiles || c - 1 >= 2 * tiles) at(r, c) = 1.0;
  Rng rng(0x4C574459ull + 0x9E3779B97F4A7C15ull * std::uint64_t(cls + 1));
  int index = 0;
  for (int tr = 0; tr < tiles; ++tr) {
    for (int tc = 0; tc < tiles; ++tc, ++index) {
      bool diagonal;
      if (index < 8)
        diagonal = ((cls >> index) & 1) != 0;
      else
        diagonal = rng.uniform_int(0, 1) == 1;
      int r0 = 1 + 2 * tr, c0 = 1 + 2 * tc;
      if (diagonal) {
        at(r0, c0) = 1.0;
        at(r0 + 1, c0 + 1) = 1.0;
      } else {
        at(r0, c0 + 1) = 1.0;
        at(r0 + 1, c0) = 1.0;
      }
    }
  }
  return bmp;
}

inline std::vector<Sample> gen_synthetic(const SyntheticSpec& spec, int count) {
  spec.validate();
  if (count < 0) throw ValueError("gen_synthetic: count must be non-negative");
  const int side = spec.image_side;
  const int gside = spec.glyph_side;
  const int grid = side / spec.patch_size;
  std::vector<std::vector<double>> bitmaps;
  bitmaps.reserve(std::size_t(spec.num_classes));
  for (int c = 0; c < spec.num_classes; ++c) bitmaps.push_back(glyph_bitmap(gside, c));

  Rng rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    Sample s;
    s.label = rng.uniform_int(0, spec.num_classes - 1);
    const int offsets = (side - gside) / spec.position_stride + 1;
    s.glyph_row = spec.position_stride * int(rng.uniform_int(0, offsets - 1));
    s.glyph_col = spec.position_stride * int(rng.uniform_int(0, offsets - 1));
    s.image = Tensor::zeros({side, side, 1});
    auto& px = s.image.data_mut();
    if (spec.noise_std > 0.0 && spec.noise_block == 1) {
      for (int p = 0; p < side * side; ++p) px[p] = spec.noise_std * rng.normal();
    } else if (spec.noise_std > 0.0) {
      const int nb = spec.noise_block;
      for (int br = 0; br < side; br += nb) {
        for (int bc = 0; bc < side; bc += nb) {
          const double v = spec.noise_std * rng.normal();
          for (int r = br; r < std::min(side, br + nb); ++r)
            for (int c = bc; c < std::min(side, bc + nb); ++c) px[r * side + c] = v;
        }
      }
    }
    const std::vector<double>& bmp = bitmaps[std::size_t(s.label)];
    s.patch_labels.assign(std::size_t(grid) * grid, 0);
    for (int r = 0; r < gside; ++r) {
      for (int c = 0; c < gside; ++c) {
        double v = bmp[std::size_t(r) * gside + c];
        if (v == 0.0) continue;
        int ir = s.glyph_row + r, ic = s.glyph_col + c;
        px[ir * side + ic] += v;
        s.patch_labels[std::size_t(ir / spec.patch_size) * grid + ic / spec.patch_size] =
            s.label + 1;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

enum class CheckpointErrorKind { kIo, kBadMagic, kBadVersion, kTruncated, kCorrupt };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

// Values are stored as little-endian 32-bit floats; the in-memory record keeps
// that payload so a save/load cycle is bitwise identity.
struct TensorRecord {
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t format_version = 1;
  std::string config_text;
  std::string rng_state;
  std::map<std::string, TensorRecord> tensors;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::map<std::string, TensorRecord> opt_m;
  std::map<std::string, TensorRecord> opt_v;
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(char(v)); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct ByteCursor {
  const std::string& bytes;
  std::size_t off = 0;

  void need(std::size_t n) const {
    if (off + n > bytes.size())
      throw CheckpointError(CheckpointErrorKind::kTruncated, "checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(bytes[off++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[off + i])) << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[off + i])) << (8 * i);
    off += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes.substr(off, n);
    off += n;
    return s;
  }
  bool done() const { return off == bytes.size(); }
};

inline void put_record(std::string& out, const std::string& name, const TensorRecord& rec) {
  put_u32(out, std::uint32_t(name.size()));
  out.append(name);
  put_u32(out, std::uint32_t(rec.shape.size()));
  for (int d : rec.shape) put_u32(out, std::uint32_t(d));
  put_u64(out, std::uint64_t(rec.data.size()));
  for (float v : rec.data) put_f32(out, v);
}

inline std::pair<std::string, TensorRecord> read_record(ByteCursor& cur) {
  std::uint32_t name_len = cur.u32();
  if (name_len > (1u << 16))
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: absurd tensor name length");
  std::string name = cur.str(name_len);
  std::uint32_t ndim = cur.u32();
  if (ndim > 8)
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: absurd tensor rank");
  TensorRecord rec;
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint32_t d = cur.u32();
    if (d == 0 || d > (1u << 24))
      throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: bad dimension");
    rec.shape.push_back(int(d));
    numel *= d;
  }
  std::uint64_t count = cur.u64();
  if (count != numel)
    throw CheckpointError(CheckpointErrorKind::kCorrupt,
                          "checkpoint: element count does not match shape");
  rec.data.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) rec.data[i] = cur.f32();
  return {std::move(name), std::move(rec)};
}

inline void put_table(std::string& out, const std::map<std::string, TensorRecord>& table) {
  put_u32(out, std::uint32_t(table.size()));
  for (const auto& [name, rec] : table) put_record(out, name, rec);
}

inline std::map<std::string, TensorRecord> read_table(ByteCursor& cur) {
  std::uint32_t n = cur.u32();
  std::map<std::string, TensorRecord> table;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, rec] = read_record(cur);
    if (table.count(name))
      throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: duplicate tensor " + name);
    table.emplace(std::move(name), std::move(rec));
  }
  return table;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'L', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, std::uint64_t(ck.config_text.size()));
  out.append(ck.config_text);
  detail::put_u64(out, std::uint64_t(ck.rng_state.size()));
  out.append(ck.rng_state);
  detail::put_table(out, ck.tensors);
  detail::put_u8(out, ck.has_optimizer ? 1 : 0);
  if (ck.has_optimizer) {
    detail::put_u64(out, ck.optimizer_step);
    detail::put_table(out, ck.opt_m);
    detail::put_table(out, ck.opt_v);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::ByteCursor cur{bytes};
  std::string magic = cur.str(4);
  if (magic != std::string(kCheckpointMagic, 4))
    throw CheckpointError(CheckpointErrorKind::kBadMagic, "checkpoint: bad magic bytes");
  Checkpoint ck;
  ck.format_version = cur.u32();
  if (ck.format_version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::kBadVersion,
                          "checkpoint: unsupported format version " +
                              std::to_string(ck.format_version));
  std::uint64_t config_len = cur.u64();
  ck.config_text = cur.str(config_len);
  std::uint64_t rng_len = cur.u64();
  ck.rng_state = cur.str(rng_len);
  ck.tensors = detail::read_table(cur);
  std::uint8_t has_opt = cur.u8();
  if (has_opt > 1)
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: bad optimizer flag");
  ck.has_optimizer = has_opt == 1;
  if (ck.has_optimizer) {
    ck.optimizer_step = cur.u64();
    ck.opt_m = detail::read_table(cur);
    ck.opt_v = detail::read_table(cur);
  }
  if (!cur.done())
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string bytes = serialize_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "checkpoint: cannot open " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "checkpoint: write failed on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// f64 parameters are narrowed to f32 on the way in and widened back on the way
// out, so a load→save cycle reproduces the file byte for byte.
inline TensorRecord to_record(const Tensor& t) {
  TensorRecord rec;
  rec.shape = t.shape();
  const auto& src = t.data();
  rec.data.resize(src.size());
  for (std::size_t i = 0; i < rec.data.size(); ++i) rec.data[i] = float(src[i]);
  return rec;
}

inline Tensor from_record(const TensorRecord& rec) {
  Tensor t = Tensor::zeros(rec.shape);
  auto& dst = t.data_mut();
  for (std::size_t i = 0; i < rec.data.size(); ++i) dst[i] = double(rec.data[i]);
  return t;
}

inline void checkpoint_put_params(Checkpoint& ck, const NamedParams& params) {
  for (const auto& [name, t] : params) ck.tensors[name] = to_record(t);
}

inline void checkpoint_read_params(const Checkpoint& ck, NamedParams& params) {
  for (auto& [name, t] : params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw ValueError("checkpoint: missing tensor " + name);
    if (it->second.shape != t.shape())
      throw ShapeError("checkpoint: shape mismatch for " + name + ": file has " +
                       shape_str(it->second.shape) + ", model expects " + shape_str(t.shape()));
    auto& dst = t.data_mut();
    for (std::size_t i = 0; i < it->second.data.size(); ++i) dst[i] = double(it->second.data[i]);
  }
}

inline void checkpoint_put_optimizer(Checkpoint& ck, const AdamWState& state) {
  ck.has_optimizer = true;
  ck.optimizer_step = std::uint64_t(state.step_count);
  ck.opt_m.clear();
  ck.opt_v.clear();
  auto pack = [](const std::map<std::string, std::vector<double>>& src,
                 std::map<std::string, TensorRecord>& dst) {
    for (const auto& [name, vec] : src) {
      TensorRecord rec;
      rec.shape = {int(vec.size())};
      rec.data.resize(vec.size());
      for (std::size_t i = 0; i < vec.size(); ++i) rec.data[i] = float(vec[i]);
      dst[name] = std::move(rec);
    }
  };
  pack(state.m, ck.opt_m);
  pack(state.v, ck.opt_v);
}

inline void checkpoint_read_optimizer(const Checkpoint& ck, AdamWState& state) {
  if (!ck.has_optimizer) throw ValueError("checkpoint: no optimizer state stored");
  state.step_count = std::int64_t(ck.optimizer_step);
  state.m.clear();
  state.v.clear();
  auto unpack = [](const std::map<std::string, TensorRecord>& src,
                   std::map<std::string, std::vector<double>>& dst) {
    for (const auto& [name, rec] : src) {
      std::vector<double> vec(rec.data.size());
      for (std::size_t i = 0; i < rec.data.size(); ++i) vec[i] = double(rec.data[i]);
      dst.emplace(name, std::move(vec));
    }
  };
  unpack(ck.opt_m, state.m);
  unpack(ck.opt_v, state.v);
}

// ---------------------------------------------------------------------------
// Raw tensor files (f64 payload) and dataset export
// ---------------------------------------------------------------------------

inline constexpr char kTensorMagic[4] = {'L', 'W', 'T', 'R'};

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::string out;
  out.append(kTensorMagic, 4);
  detail::put_u32(out, 1);
  detail::put_u32(out, std::uint32_t(t.ndim()));
  for (int d : t.shape()) detail::put_u32(out, std::uint32_t(d));
  detail::put_u64(out, std::uint64_t(t.numel()));
  for (double v : t.data()) detail::put_f64(out, v);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "tensor file: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "tensor file: write failed on " + path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "tensor file: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteCursor cur{bytes};
  if (cur.str(4) != std::string(kTensorMagic, 4))
    throw CheckpointError(CheckpointErrorKind::kBadMagic, "tensor file: bad magic bytes");
  std::uint32_t version = cur.u32();
  if (version != 1)
    throw CheckpointError(CheckpointErrorKind::kBadVersion, "tensor file: unsupported version");
  std::uint32_t ndim = cur.u32();
  if (ndim > 8)
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "tensor file: absurd rank");
  Shape shape;
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint32_t d = cur.u32();
    if (d == 0 || d > (1u << 24))
      throw CheckpointError(CheckpointErrorKind::kCorrupt, "tensor file: bad dimension");
    shape.push_back(int(d));
    numel *= d;
  }
  std::uint64_t count = cur.u64();
  if (count != numel)
    throw CheckpointError(CheckpointErrorKind::kCorrupt,
                          "tensor file: element count does not match shape");
  Tensor t = Tensor::zeros(shape);
  auto& dst = t.data_mut();
  for (std::uint64_t i = 0; i < count; ++i) dst[i] = cur.f64();
  if (!cur.done())
    throw CheckpointError(CheckpointErrorKind::kCorrupt, "tensor file: trailing bytes");
  return t;
}

// Writes one .lwt file per sample plus a manifest: "<filename>\t<label>\n".
inline void export_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.lwt", i);
    save_tensor((std::filesystem::path(dir) / name).string(), samples[i].image);
    manifest += name;
    manifest += '\t';
    manifest += std::to_string(samples[i].label);
    manifest += '\n';
  }
  std::ofstream f(std::filesystem::path(dir) / "manifest.tsv", std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "export: cannot write manifest");
  f << manifest;
}

// ---------------------------------------------------------------------------
// Heatmap output
// ---------------------------------------------------------------------------

inline void write_heatmap_pgm(const std::string& path, const Tensor& map, int upscale = 1) {
  if (map.ndim() != 2) throw ShapeError("write_heatmap_pgm: map must be 2-D");
  if (upscale < 1) throw ValueError("write_heatmap_pgm: upscale must be at least 1");
  const int h = map.dim(0), w = map.dim(1);
  const auto& src = map.data();
  double lo = src[0], hi = src[0];
  for (long i = 0; i < map.numel(); ++i) {
    if (!std::isfinite(src[i])) throw ValueError("write_heatmap_pgm: map must be finite");
    lo = std::min(lo, src[i]);
    hi = std::max(hi, src[i]);
  }
  const double range = hi - lo;
  std::string out = "P5\n" + std::to_string(w * upscale) + " " + std::to_string(h * upscale) +
                    "\n255\n";
  for (int r = 0; r < h * upscale; ++r) {
    for (int c = 0; c < w * upscale; ++c) {
      double v = src[std::size_t(r / upscale) * w + c / upscale];
      int byte = range > 0.0 ? int(std::lround((v - lo) / range * 255.0)) : 128;
      out.push_back(char(std::clamp(byte, 0, 255)));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "heatmap: cannot open " + path);
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw CheckpointError(CheckpointErrorKind::kIo, "heatmap: write failed on " + path);
}

}  // namespace lookwhere
