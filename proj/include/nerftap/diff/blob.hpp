#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "nerftap/diff/tensor.hpp"

namespace nerftap::diff {

/// Named float32 tensors in the NFTP checkpoint layout:
///
///   "NFTP" | u32 version | u32 count | count x { u32 name_len | name | u32 rank |
///   rank x u32 dim | numel x f32 }
///
/// All integers and floats are little-endian. Entries are written in name order.
using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kBlobVersion = 1;

class BlobError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_blob(const TensorMap& tensors);
TensorMap decode_blob(const std::vector<std::uint8_t>& bytes);

void save_blob(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_blob(const std::filesystem::path& path);

/// Looks up `name`, throwing BlobError when absent or when the shape differs.
const Tensor& blob_get(const TensorMap& tensors, const std::string& name, const Shape& expected);

}  // namespace nerftap::diff
