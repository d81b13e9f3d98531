#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "seqft/model.hpp"

namespace seqft {

/// SQFT checkpoint, little-endian:
///   "SQFT" | version u32 | entry count u32 |
///   per entry: name length u16, UTF-8 name, ndim u8, dims u32 x ndim, f32 payload |
///   CRC-32 (IEEE) of every preceding byte, u32.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const NamedTensors<float>& params);
NamedTensors<float> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors<float>& params);
NamedTensors<float> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a of the encoded checkpoint bytes.
std::uint64_t checkpoint_hash(const NamedTensors<float>& params);
std::string hex64(std::uint64_t value);

inline void save_model(const std::filesystem::path& path, const ModelState<float>& model) {
  save_checkpoint(path, named_parameters(model));
}

inline ModelState<float> load_model(const std::filesystem::path& path, const ArchMeta& arch) {
  ModelState<float> model = init_model<float>(arch, 0);
  load_parameters(model, load_checkpoint(path));
  return model;
}

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace seqft
