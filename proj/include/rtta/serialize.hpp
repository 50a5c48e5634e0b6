#pragma once

#include <filesystem>
#include <fstream>

#include "rtta/data.hpp"
#include "rtta/model.hpp"

namespace rtta {

// Container framing shared by checkpoint and dataset files: magic "RTTA",
// format version, block type, then the little-endian payload. Round-trips are
// bit-exact (doubles are stored by bit pattern).
inline constexpr char kMagic[4] = {'R', 'T', 'T', 'A'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kBlockCheckpoint = 1;
inline constexpr std::uint32_t kBlockDataset = 2;

namespace detail {

inline void put_header(std::string& out, std::uint32_t block_type) {
  out.append(kMagic, 4);
  put_u32(out, kFormatVersion);
  put_u32(out, block_type);
}

inline ByteReader open_block(std::span<const char> data, std::uint32_t want_type, const char* what) {
  ByteReader r(data);
  if (data.size() < 4 || std::memcmp(data.data(), kMagic, 4) != 0)
    throw IoError(std::string(what) + ": bad magic (not an RTTA file)");
  ByteReader body(data.subspan(4));
  const std::uint32_t version = body.u32();
  if (version != kFormatVersion)
    throw IoError(std::string(what) + ": unsupported format version " + std::to_string(version));
  const std::uint32_t type = body.u32();
  if (type != want_type)
    throw IoError(std::string(what) + ": wrong block type " + std::to_string(type));
  return body;
}

inline void put_shape(std::string& out, const Shape& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  for (int d : s) put_u64(out, static_cast<std::uint64_t>(d));
}

inline Shape get_shape(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  Shape s(rank);
  for (auto& d : s) d = static_cast<int>(r.u64());
  return s;
}

inline void put_f64_vec(std::string& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) put_f64(out, x);
}

inline std::vector<double> get_f64_vec(ByteReader& r) {
  std::vector<double> v(r.u64());
  for (auto& x : v) x = r.f64();
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out;
  detail::put_header(out, kBlockCheckpoint);
  put_u32(out, ckpt.spec.architecture == Architecture::mlp ? 0u : 1u);
  put_u32(out, static_cast<std::uint32_t>(ckpt.spec.num_classes));
  detail::put_shape(out, ckpt.spec.input_shape);
  put_u32(out, static_cast<std::uint32_t>(ckpt.spec.mlp_widths.size()));
  for (int w : ckpt.spec.mlp_widths) put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(ckpt.spec.cnn_channels.size()));
  for (int c : ckpt.spec.cnn_channels) put_u32(out, static_cast<std::uint32_t>(c));
  put_str(out, ckpt.provenance);

  put_u32(out, static_cast<std::uint32_t>(ckpt.parameters.size()));
  for (const auto& [name, t] : ckpt.parameters) {
    put_str(out, name);
    detail::put_shape(out, t.shape);
    for (double v : t.values) put_f64(out, v);
  }

  put_u32(out, static_cast<std::uint32_t>(ckpt.bn_states.size()));
  for (const auto& [name, s] : ckpt.bn_states) {
    put_str(out, name);
    put_f64(out, s.momentum);
    detail::put_f64_vec(out, s.running_mean);
    detail::put_f64_vec(out, s.running_var);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::span<const char> data) {
  ByteReader r = detail::open_block(data, kBlockCheckpoint, "checkpoint");
  Checkpoint ckpt;
  ckpt.spec.architecture = r.u32() == 0 ? Architecture::mlp : Architecture::cnn;
  ckpt.spec.num_classes = static_cast<int>(r.u32());
  ckpt.spec.input_shape = detail::get_shape(r);
  ckpt.spec.mlp_widths.resize(r.u32());
  for (auto& w : ckpt.spec.mlp_widths) w = static_cast<int>(r.u32());
  ckpt.spec.cnn_channels.resize(r.u32());
  for (auto& c : ckpt.spec.cnn_channels) c = static_cast<int>(r.u32());
  ckpt.provenance = r.str();

  const std::uint32_t nparams = r.u32();
  for (std::uint32_t i = 0; i < nparams; ++i) {
    const std::string name = r.str();
    const Shape shape = detail::get_shape(r);
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = r.f64();
    ckpt.parameters[name] = Tensor(shape, std::move(values));
  }

  const std::uint32_t nbn = r.u32();
  for (std::uint32_t i = 0; i < nbn; ++i) {
    const std::string name = r.str();
    BatchNormState s;
    s.momentum = r.f64();
    s.running_mean = detail::get_f64_vec(r);
    s.running_var = detail::get_f64_vec(r);
    ckpt.bn_states[name] = std::move(s);
  }
  ckpt.spec.validate();
  return ckpt;
}

inline std::string serialize_dataset(const Dataset& ds) {
  ds.validate();
  std::string out;
  detail::put_header(out, kBlockDataset);
  put_u32(out, ds.domain.kind == DomainTag::Kind::source ? 0u : 1u);
  put_u32(out, static_cast<std::uint32_t>(ds.domain.severity));
  put_u32(out, static_cast<std::uint32_t>(ds.num_classes));
  detail::put_shape(out, ds.image_shape());
  put_u64(out, ds.size());
  for (int y : ds.labels) put_u32(out, static_cast<std::uint32_t>(y));
  for (const auto& img : ds.inputs)
    for (double v : img.values) put_f64(out, v);
  return out;
}

inline Dataset deserialize_dataset(std::span<const char> data) {
  ByteReader r = detail::open_block(data, kBlockDataset, "dataset");
  Dataset ds;
  ds.domain.kind = r.u32() == 0 ? DomainTag::Kind::source : DomainTag::Kind::target;
  ds.domain.severity = static_cast<int>(r.u32());
  ds.num_classes = static_cast<int>(r.u32());
  const Shape img_shape = detail::get_shape(r);
  const std::uint64_t n = r.u64();
  ds.labels.resize(n);
  for (auto& y : ds.labels) y = static_cast<int>(r.u32());
  ds.inputs.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::vector<double> values(numel(img_shape));
    for (auto& v : values) v = r.f64();
    ds.inputs.emplace_back(img_shape, std::move(values));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Files (written atomically: temp + rename)
// ---------------------------------------------------------------------------

inline void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return data;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  return deserialize_checkpoint(std::span<const char>(data.data(), data.size()));
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  write_file_atomic(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  return deserialize_dataset(std::span<const char>(data.data(), data.size()));
}

}  // namespace rtta
