#include "ecm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ecm {

namespace {

constexpr char kMagic[4] = {'E', 'C', 'M', 'C'};
constexpr uint8_t kDtypeF32 = 0;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  std::vector<char> bytes;
  uint64_t pos = 0;

  void need(uint64_t n, const char* what) {
    if (pos + n > bytes.size()) throw CheckpointError(std::string("truncated ") + what, pos);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(bytes[static_cast<size_t>(pos++)]);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[static_cast<size_t>(pos + i)]))
           << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[static_cast<size_t>(pos + i)]))
           << (8 * i);
    pos += 8;
    return v;
  }
};

float f32_from_le(const char* b) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

void f32_to_le(float f, std::string& buf) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}

}  // namespace

void Checkpoint::add(const std::string& name, const Shape& shape, std::vector<float> data) {
  if (name.empty()) throw TensorError("Checkpoint::add: empty name");
  if (has(name)) throw TensorError("Checkpoint::add: duplicate name " + name);
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw TensorError("Checkpoint::add: shape/data mismatch for " + name);
  arrays_.push_back(Array{name, shape, std::move(data)});
}

void Checkpoint::add_tensor(const std::string& name, const Tensor& t) {
  std::vector<float> data(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) data[static_cast<size_t>(i)] =
      static_cast<float>(t.data()[i]);
  add(name, t.shape(), std::move(data));
}

bool Checkpoint::has(const std::string& name) const {
  for (const Array& a : arrays_)
    if (a.name == name) return true;
  return false;
}

const Checkpoint::Array& Checkpoint::get(const std::string& name) const {
  for (const Array& a : arrays_)
    if (a.name == name) return a;
  throw TensorError("Checkpoint::get: no array named " + name);
}

void Checkpoint::load_tensor(const std::string& name, Tensor& t) const {
  const Array& a = get(name);
  if (a.shape != t.shape()) throw TensorError("Checkpoint::load_tensor: shape mismatch for " + name);
  for (size_t i = 0; i < a.data.size(); ++i) t.data()[i] = static_cast<double>(a.data[i]);
}

void Checkpoint::add_named(const std::vector<std::pair<std::string, Tensor>>& named) {
  for (const auto& [name, t] : named) add_tensor(name, t);
}

void Checkpoint::load_named(const std::vector<std::pair<std::string, Tensor>>& named) const {
  for (const auto& [name, t] : named) {
    Tensor target = t;
    load_tensor(name, target);
  }
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string dir;
  std::string payload;
  for (const Checkpoint::Array& a : ckpt.arrays()) {
    put_u32(dir, static_cast<uint32_t>(a.name.size()));
    dir += a.name;
    dir.push_back(static_cast<char>(kDtypeF32));
    dir.push_back(static_cast<char>(a.shape.size()));
    for (int d : a.shape) put_u32(dir, static_cast<uint32_t>(d));
    put_u64(dir, payload.size());
    for (float f : a.data) f32_to_le(f, payload);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TensorError("write_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  std::string head;
  put_u32(head, Checkpoint::kVersion);
  put_u32(head, static_cast<uint32_t>(ckpt.arrays().size()));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(dir.data(), static_cast<std::streamsize>(dir.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw TensorError("write_checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError("read_checkpoint: cannot open " + path);
  Reader r;
  r.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  r.need(4, "magic");
  if (std::memcmp(r.bytes.data(), kMagic, 4) != 0) throw CheckpointError("bad magic", 0);
  r.pos = 4;
  const uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) throw CheckpointError("unsupported version", 4);
  const uint32_t count = r.u32("array count");

  struct Entry {
    std::string name;
    Shape shape;
    uint64_t offset;
    uint64_t entry_at;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.entry_at = r.pos;
    const uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    e.name.assign(r.bytes.data() + r.pos, name_len);
    r.pos += name_len;
    const uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) throw CheckpointError("unsupported dtype", r.pos - 1);
    const uint8_t rank = r.u8("rank");
    for (int d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32("dim");
      if (dim == 0 || dim > (1u << 24)) throw CheckpointError("bad dimension", r.pos - 4);
      e.shape.push_back(static_cast<int>(dim));
    }
    e.offset = r.u64("payload offset");
    entries.push_back(std::move(e));
  }

  const uint64_t payload_start = r.pos;
  const uint64_t payload_size = r.bytes.size() - payload_start;
  Checkpoint ckpt;
  for (const Entry& e : entries) {
    const uint64_t bytes = static_cast<uint64_t>(shape_numel(e.shape)) * 4;
    if (e.offset + bytes > payload_size)
      throw CheckpointError("payload out of range for " + e.name, e.entry_at);
    std::vector<float> data(static_cast<size_t>(shape_numel(e.shape)));
    const char* src = r.bytes.data() + payload_start + e.offset;
    for (size_t i = 0; i < data.size(); ++i) data[i] = f32_from_le(src + 4 * i);
    if (ckpt.has(e.name)) throw CheckpointError("duplicate name " + e.name, e.entry_at);
    ckpt.add(e.name, e.shape, std::move(data));
  }
  return ckpt;
}

}  // namespace ecm
