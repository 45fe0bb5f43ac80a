// Versioned binary container for named tensors.
//
// Layout (little-endian):
//   magic "CSEPCKPT" | u32 version | u32 config_len | config JSON bytes |
//   u32 tensor_count | per tensor: u32 name_len | name | u8 dtype |
//   u32 rank | u32 extents[rank] | values (f32 or f64)
#pragma once

#include "codecsep/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace codecsep {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct TensorBundle {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle, Dtype dtype);
TensorBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// Writes via a temporary file and rename, so readers never see a partial file.
void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle, Dtype dtype);
TensorBundle load_bundle(const std::filesystem::path& path);

/// FNV-1a over the compact JSON dump.
std::uint64_t config_hash(const nlohmann::json& config);
std::string hash_hex(std::uint64_t h);

}  // namespace codecsep
