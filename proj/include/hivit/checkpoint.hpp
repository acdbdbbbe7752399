#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hivit/model.hpp"

// HVCK checkpoint: versioned header, three text sections (config, meta, rng
// state) and a list of named little-endian arrays. See FORMATS.md.
namespace hivit {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedArray {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string config;
  std::string meta;  // key = value lines
  std::string rng;
  std::vector<NamedArray> arrays;

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values);
  const NamedArray* find(const std::string& name) const;
  // Copies a stored array into `out`; the dtype and shape must match.
  template <typename T>
  void get(const std::string& name, const Shape& shape, std::span<T> out) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin);

// Writes to "<path>.tmp" and renames over `path`, so a reader never sees a
// partial file.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Stores every parameter under prefix + name.
template <typename T>
void store_params(Checkpoint& ck, const ParamList<T>& params, const std::string& prefix);

// Loads every parameter from prefix + name. Arrays under `prefix` that match
// no parameter are rejected with a listing; the first shape mismatch and any
// missing parameter are errors too. `scope` narrows the unknown-name check
// (default: `prefix`), e.g. to load only the encoder of a larger model.
template <typename T>
void restore_params(const Checkpoint& ck, ParamList<T>& params, const std::string& prefix,
                    const std::string& scope = {});

}  // namespace hivit
