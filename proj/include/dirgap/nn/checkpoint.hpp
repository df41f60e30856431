#pragma once

// Checkpoint container: a binary file of (name, shape, flags, float32 data)
// records, all integers and floats little-endian, plus a text manifest
// "<path>.manifest" listing one record per line.
//
//   magic "DGCKPT01" | u32 count | count x record
//   record: u32 name_len | name | u32 ndim | u64 dims[ndim] | u8 trainable
//           | u8 decay | f32 values[numel]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "dirgap/errors.hpp"
#include "dirgap/nn/array.hpp"

namespace dirgap::nn {

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'D', 'G', 'C', 'K', 'P', 'T', '0', '1'};

template <class U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  out.write(buf.data(), buf.size());
}

template <class U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size()))
    throw LoadError("truncated checkpoint");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest");
}

template <class T>
void save_checkpoint(const ParameterStore<T>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  std::ofstream manifest(manifest_path(path));
  out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.shape.size()));
    for (auto dim : e.value.shape) detail::put_le<std::uint64_t>(out, dim);
    detail::put_le<std::uint8_t>(out, e.trainable ? 1 : 0);
    detail::put_le<std::uint8_t>(out, e.decay ? 1 : 0);
    for (const T& v : e.value.values)
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    manifest << name << '\t' << shape_string(e.value.shape) << '\t'
             << (e.trainable ? "trainable" : "frozen") << '\t'
             << (e.decay ? "decay" : "no_decay") << '\n';
  }
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

template <class T>
ParameterStore<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw LoadError("not a checkpoint: " + path.string());
  ParameterStore<T> params;
  const auto count = detail::get_le<std::uint32_t>(in);
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = detail::get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw LoadError("truncated checkpoint");
    const auto ndim = detail::get_le<std::uint32_t>(in);
    Shape shape(ndim);
    for (auto& dim : shape) dim = detail::get_le<std::uint64_t>(in);
    const bool trainable = detail::get_le<std::uint8_t>(in) != 0;
    const bool decay = detail::get_le<std::uint8_t>(in) != 0;
    auto& e = params.add(name, shape, decay);
    e.trainable = trainable;
    for (T& v : e.value.values)
      v = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(in)));
  }
  return params;
}

/// Copies checkpoint values into an existing store. Every entry of `params`
/// must be present with the same shape; flags of `params` are kept.
template <class T>
void load_into(ParameterStore<T>& params, const std::filesystem::path& path) {
  auto loaded = load_checkpoint<T>(path);
  for (auto& [name, e] : params) {
    if (!loaded.contains(name)) throw LoadError("checkpoint lacks parameter " + name);
    const auto& src = loaded.at(name);
    if (src.value.shape != e.value.shape)
      throw LoadError("shape mismatch for " + name + ": checkpoint " +
                      shape_string(src.value.shape) + " vs model " +
                      shape_string(e.value.shape));
    e.value.values = src.value.values;
  }
}

}  // namespace dirgap::nn
