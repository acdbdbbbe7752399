#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// HVC1 image corpus: fixed header followed by fixed-size records of 8-bit
// HWC pixels and an optional little-endian u16 label. See FORMATS.md.
namespace hivit {

struct CorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCorpusVersion = 1;

struct CorpusHeader {
  std::uint32_t version = kCorpusVersion;
  std::uint64_t count = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 3;
  bool labeled = false;
  std::vector<float> mean;  // per channel, in [0, 1] pixel units
  std::vector<float> std;

  std::uint64_t header_bytes() const { return 32 + 8ull * channels; }
  std::uint64_t pixel_bytes() const { return std::uint64_t(height) * width * channels; }
  std::uint64_t record_bytes() const { return pixel_bytes() + (labeled ? 2 : 0); }
  std::uint64_t file_bytes() const { return header_bytes() + count * record_bytes(); }
};

std::vector<std::uint8_t> encode_corpus_header(const CorpusHeader& h);

// Streams records to `path` through a temporary file; close() patches the
// count into the header and renames it into place.
class CorpusWriter {
 public:
  CorpusWriter(std::string path, CorpusHeader header);
  ~CorpusWriter();
  CorpusWriter(const CorpusWriter&) = delete;
  CorpusWriter& operator=(const CorpusWriter&) = delete;

  void append(std::span<const std::uint8_t> hwc_pixels, int label = 0);
  void close();

 private:
  std::string path_, tmp_;
  CorpusHeader header_;
  std::FILE* f_ = nullptr;
};

// Random-access reader. Records are fetched with positioned reads, so one
// reader can serve several threads and memory use is one batch.
class CorpusReader {
 public:
  explicit CorpusReader(const std::string& path);
  ~CorpusReader();
  CorpusReader(const CorpusReader&) = delete;
  CorpusReader& operator=(const CorpusReader&) = delete;

  const CorpusHeader& header() const { return header_; }
  std::int64_t size() const { return static_cast<std::int64_t>(header_.count); }
  const std::string& path() const { return path_; }

  // Raw HWC bytes of record i; returns the label (0 when unlabeled).
  int read_record(std::int64_t i, std::span<std::uint8_t> pixels) const;

  // Records at `indices` as normalized CHW floats [B, C, H, W]:
  // (byte / 255 - mean[c]) / std[c]. Labels are written when non-empty.
  template <typename T>
  void load_batch(std::span<const std::int64_t> indices, std::span<T> out, std::span<int> labels) const;

 private:
  std::string path_;
  int fd_ = -1;
  CorpusHeader header_;
};

enum class SynthKind { GaussianBlobs, Textures, LabeledShapes };
SynthKind parse_synth_kind(const std::string& name);
const char* synth_kind_name(SynthKind k);

// Deterministic synthetic corpus. LabeledShapes draws one of `classes`
// shape types per image and stores it as the label. Per-channel mean/std of
// the generated pixels go into the header.
void synth_corpus(const std::string& path, std::int64_t n, int size, SynthKind kind,
                  std::uint64_t seed, int classes = 4);

}  // namespace hivit
