#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ecm/tensor.hpp"

namespace ecm {

// Raised on malformed files; `offset` is the file position of the defect.
struct CheckpointError : std::runtime_error {
  uint64_t offset;
  CheckpointError(const std::string& msg, uint64_t at)
      : std::runtime_error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
};

// Named f32 arrays with a directory, serialized as:
//   "ECMC" magic, u32 version, u32 count,
//   per entry: u32 name length + UTF-8 bytes, u8 dtype (0 = f32), u8 rank,
//              u32 dims[rank], u64 payload byte offset,
//   then the packed little-endian f32 payload.
class Checkpoint {
 public:
  struct Array {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };

  static constexpr uint32_t kVersion = 1;

  void add(const std::string& name, const Shape& shape, std::vector<float> data);
  void add_tensor(const std::string& name, const Tensor& t);
  bool has(const std::string& name) const;
  const Array& get(const std::string& name) const;
  const std::vector<Array>& arrays() const { return arrays_; }

  // Copies the stored array into `t`; shapes must match exactly.
  void load_tensor(const std::string& name, Tensor& t) const;
  void add_named(const std::vector<std::pair<std::string, Tensor>>& named);
  void load_named(const std::vector<std::pair<std::string, Tensor>>& named) const;

 private:
  std::vector<Array> arrays_;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ecm
