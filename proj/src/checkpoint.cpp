#include "hivit/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

namespace hivit {
namespace {

constexpr char kMagic[4] = {'H', 'V', 'C', 'K'};
constexpr std::size_t kFixed = 24;

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

void put_uint(std::vector<std::uint8_t>& b, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_text(std::vector<std::uint8_t>& b, const std::string& s) {
  put_uint(b, s.size(), 4);
  b.insert(b.end(), s.begin(), s.end());
}

class Cursor {
 public:
  Cursor(std::span<const std::uint8_t> b, const std::string& origin) : b_(b), origin_(origin) {}

  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> raw(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size())
      throw CheckpointError("'" + origin_ + "': corrupt checkpoint (field at byte " +
                            std::to_string(pos_) + " runs past the end)");
  }
  std::span<const std::uint8_t> b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Shape& shape, std::span<const T> values) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw CheckpointError("array '" + name + "': " + std::to_string(values.size()) +
                          " values for shape " + shape_str(shape));
  if (find(name)) throw CheckpointError("duplicate array name '" + name + "'");
  NamedArray a{name, dtype_of<T>(), shape, std::vector<std::uint8_t>(values.size() * sizeof(T))};
  // Host order is little-endian on every supported target.
  std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  arrays.push_back(std::move(a));
}

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

template <typename T>
void Checkpoint::get(const std::string& name, const Shape& shape, std::span<T> out) const {
  const auto* a = find(name);
  if (!a) throw CheckpointError("checkpoint has no array '" + name + "'");
  if (a->dtype != dtype_of<T>())
    throw CheckpointError("array '" + name + "' has dtype " + (a->dtype == DType::F32 ? "f32" : "f64") +
                          ", expected " + (dtype_of<T>() == DType::F32 ? "f32" : "f64"));
  if (a->shape != shape)
    throw CheckpointError("shape mismatch for '" + name + "': checkpoint " + shape_str(a->shape) +
                          ", model " + shape_str(shape));
  if (out.size() * sizeof(T) != a->bytes.size()) throw CheckpointError("array '" + name + "': bad size");
  std::memcpy(out.data(), a->bytes.data(), a->bytes.size());
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> b(kMagic, kMagic + 4);
  put_uint(b, kCheckpointVersion, 4);
  put_uint(b, 0, 8);  // total length, patched below
  put_uint(b, ck.step, 8);
  put_text(b, ck.config);
  put_text(b, ck.meta);
  put_text(b, ck.rng);
  put_uint(b, ck.arrays.size(), 4);
  for (const auto& a : ck.arrays) {
    if (a.name.size() > 0xFFFF) throw CheckpointError("array name too long");
    put_uint(b, a.name.size(), 2);
    b.insert(b.end(), a.name.begin(), a.name.end());
    put_uint(b, static_cast<std::uint8_t>(a.dtype), 1);
    put_uint(b, a.shape.size(), 1);
    for (auto d : a.shape) put_uint(b, static_cast<std::uint64_t>(d), 8);
    put_uint(b, a.bytes.size(), 8);
    b.insert(b.end(), a.bytes.begin(), a.bytes.end());
  }
  const std::uint64_t total = b.size();
  for (int i = 0; i < 8; ++i) b[8 + i] = static_cast<std::uint8_t>(total >> (8 * i));
  return b;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < kFixed || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("'" + origin + "' is not an HVCK checkpoint");
  Cursor c(bytes, origin);
  c.uint(4);
  const auto version = static_cast<std::uint32_t>(c.uint(4));
  if (version != kCheckpointVersion)
    throw CheckpointError("'" + origin + "': checkpoint version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  const std::uint64_t total = c.uint(8);
  if (total != bytes.size())
    throw CheckpointError("'" + origin + "': truncated or padded checkpoint (" +
                          std::to_string(bytes.size()) + " bytes, header says " + std::to_string(total) + ")");
  Checkpoint ck;
  ck.step = c.uint(8);
  ck.config = c.text(c.uint(4));
  ck.meta = c.text(c.uint(4));
  ck.rng = c.text(c.uint(4));
  const auto n = c.uint(4);
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedArray a;
    a.name = c.text(c.uint(2));
    const auto dt = c.uint(1);
    if (dt > 1) throw CheckpointError("'" + origin + "': array '" + a.name + "' has unknown dtype");
    a.dtype = static_cast<DType>(dt);
    const auto rank = c.uint(1);
    for (std::uint64_t r = 0; r < rank; ++r) a.shape.push_back(static_cast<std::int64_t>(c.uint(8)));
    const auto nbytes = c.uint(8);
    if (nbytes != static_cast<std::uint64_t>(shape_numel(a.shape)) * dtype_size(a.dtype))
      throw CheckpointError("'" + origin + "': array '" + a.name + "' byte count disagrees with its shape");
    a.bytes = c.raw(nbytes);
    ck.arrays.push_back(std::move(a));
  }
  if (!c.done()) throw CheckpointError("'" + origin + "': trailing bytes after the last array");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = encode_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot create '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

template <typename T>
void store_params(Checkpoint& ck, const ParamList<T>& params, const std::string& prefix) {
  for (const auto& p : params) ck.put<T>(prefix + p.name, p.tensor.shape(), p.tensor.data());
}

template <typename T>
void restore_params(const Checkpoint& ck, ParamList<T>& params, const std::string& prefix,
                    const std::string& scope) {
  const std::string& within = scope.empty() ? prefix : scope;
  std::set<std::string> known;
  for (const auto& p : params) known.insert(prefix + p.name);
  std::string unknown;
  for (const auto& a : ck.arrays)
    if (a.name.rfind(within, 0) == 0 && !known.count(a.name)) unknown += (unknown.empty() ? "" : ", ") + a.name;
  if (!unknown.empty()) throw CheckpointError("checkpoint arrays not present in the model: " + unknown);
  // Validate everything before touching any parameter.
  for (const auto& p : params) {
    const auto* a = ck.find(prefix + p.name);
    if (!a) throw CheckpointError("checkpoint has no array '" + prefix + p.name + "'");
    if (a->shape != p.tensor.shape())
      throw CheckpointError("shape mismatch for '" + a->name + "': checkpoint " + shape_str(a->shape) +
                            ", model " + shape_str(p.tensor.shape()));
  }
  for (auto& p : params) {
    auto data = p.tensor.data();
    ck.get<T>(prefix + p.name, p.tensor.shape(), data);
  }
}

#define HIVIT_INSTANTIATE_CKPT(T)                                                                  \
  template void Checkpoint::put<T>(const std::string&, const Shape&, std::span<const T>);          \
  template void Checkpoint::get<T>(const std::string&, const Shape&, std::span<T>) const;          \
  template void store_params<T>(Checkpoint&, const ParamList<T>&, const std::string&);             \
  template void restore_params<T>(const Checkpoint&, ParamList<T>&, const std::string&, \
                                  const std::string&);

HIVIT_INSTANTIATE_CKPT(float)
HIVIT_INSTANTIATE_CKPT(double)

}  // namespace hivit
