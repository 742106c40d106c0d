#pragma once

#include <harmonia/autodiff.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace harmonia {

// Binary layout, little-endian:
//   "HARM" | u32 version | u32 array count |
//   per array: u32 name length | name bytes | u32 ndim | u64 dims[ndim] | f64 data[]
// Names starting with '@' are reserved for configuration and optimizer state.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  ad::Array data;
};

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct Checkpoint {
  std::vector<NamedArray> arrays;

  void put(const std::string& name, std::vector<std::uint64_t> dims, ad::Array data);
  void put_scalars(const std::string& name, const std::vector<double>& values);
  const NamedArray* find(const std::string& name) const;
  const NamedArray& at(const std::string& name) const;

  /// Stores every parameter under its own name.
  void put_parameters(const ad::ParameterStore& store);
  /// Restores parameters; every store entry must be present with its shape.
  void get_parameters(ad::ParameterStore& store) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace harmonia
