#include "hivit/corpus.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <random>

namespace hivit {
namespace {

constexpr char kMagic[4] = {'H', 'V', 'C', '1'};

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}
std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}
float get_f32(const std::uint8_t* p) {
  const std::uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

void pread_all(int fd, void* buf, std::size_t n, std::uint64_t off, const std::string& path) {
  auto* p = static_cast<char*>(buf);
  while (n > 0) {
    const ssize_t got = ::pread(fd, p, n, static_cast<off_t>(off));
    if (got <= 0) throw CorpusError("'" + path + "': short read at offset " + std::to_string(off));
    p += got;
    n -= static_cast<std::size_t>(got);
    off += static_cast<std::uint64_t>(got);
  }
}

std::uint64_t image_seed(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Renders one image into HWC floats in [0, 1]; returns the label.
int render(std::vector<double>& img, int s, SynthKind kind, std::mt19937_64& rng, int classes) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  std::normal_distribution<double> noise(0.0, 1.0);
  img.assign(static_cast<std::size_t>(s) * s * 3, 0.0);
  auto px = [&](int y, int x, int c) -> double& { return img[(static_cast<std::size_t>(y) * s + x) * 3 + c]; };
  int label = 0;
  switch (kind) {
    case SynthKind::GaussianBlobs: {
      double base[3];
      for (double& b : base) b = uni(0.25, 0.75);
      const int blobs = 2 + static_cast<int>(rng() % 4);
      struct Blob { double cy, cx, inv2s2, col[3]; };
      std::vector<Blob> bl(static_cast<std::size_t>(blobs));
      for (auto& b : bl) {
        b.cy = uni(0, s);
        b.cx = uni(0, s);
        const double sigma = uni(s / 10.0, s / 3.0);
        b.inv2s2 = 1.0 / (2 * sigma * sigma);
        for (double& c : b.col) c = uni(-0.5, 0.5);
      }
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          for (int c = 0; c < 3; ++c) {
            double v = base[c];
            for (const auto& b : bl) {
              const double r2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
              v += b.col[c] * std::exp(-r2 * b.inv2s2);
            }
            px(y, x, c) = v + 0.01 * noise(rng);
          }
      break;
    }
    case SynthKind::Textures: {
      struct Wave { double fy, fx, phase, amp[3]; };
      std::vector<Wave> waves(3);
      for (auto& w : waves) {
        const double freq = uni(1.0, s / 6.0) * 2 * std::numbers::pi / s;
        const double ang = uni(0, std::numbers::pi);
        w.fy = freq * std::sin(ang);
        w.fx = freq * std::cos(ang);
        w.phase = uni(0, 2 * std::numbers::pi);
        for (double& a : w.amp) a = uni(0.05, 0.15);
      }
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          for (int c = 0; c < 3; ++c) {
            double v = 0.5;
            for (const auto& w : waves) v += w.amp[c] * std::sin(w.fy * y + w.fx * x + w.phase);
            px(y, x, c) = v + 0.01 * noise(rng);
          }
      break;
    }
    case SynthKind::LabeledShapes: {
      label = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
      double bg[3], fg[3];
      for (double& b : bg) b = uni(0.0, 0.35);
      for (double& f : fg) f = uni(0.6, 1.0);
      const double cy = uni(s * 0.3, s * 0.7), cx = uni(s * 0.3, s * 0.7);
      const double r = uni(s * 0.18, s * 0.3);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          bool in = false;
          switch (label) {
            case 0: in = dy * dy + dx * dx <= r * r; break;                       // disc
            case 1: in = std::abs(dy) <= r * 0.8 && std::abs(dx) <= r * 0.8; break;  // square
            case 2: in = dy <= r * 0.7 && dy >= -r && std::abs(dx) <= (dy + r) * 0.6; break;  // triangle
            case 3: {                                                             // ring
              const double d2 = dy * dy + dx * dx;
              in = d2 <= r * r && d2 >= 0.4 * r * r;
              break;
            }
            case 4: in = (std::abs(dy) <= r * 0.25 && std::abs(dx) <= r) ||
                         (std::abs(dx) <= r * 0.25 && std::abs(dy) <= r);  // plus
              break;
            default: in = std::abs(dy) <= r && std::fmod(std::abs(dy), r * 0.5) < r * 0.25 &&
                          std::abs(dx) <= r;  // stripes
          }
          for (int c = 0; c < 3; ++c) px(y, x, c) = (in ? fg[c] : bg[c]) + 0.03 * noise(rng);
        }
      break;
    }
  }
  return label;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::vector<std::uint8_t> encode_corpus_header(const CorpusHeader& h) {
  if (h.mean.size() != h.channels || h.std.size() != h.channels)
    throw CorpusError("corpus header: mean/std need one value per channel");
  std::vector<std::uint8_t> b(kMagic, kMagic + 4);
  put_u32(b, h.version);
  put_u64(b, h.count);
  put_u32(b, h.height);
  put_u32(b, h.width);
  put_u32(b, h.channels);
  put_u32(b, h.labeled ? 1 : 0);
  for (float m : h.mean) put_f32(b, m);
  for (float s : h.std) put_f32(b, s);
  return b;
}

CorpusWriter::CorpusWriter(std::string path, CorpusHeader header)
    : path_(std::move(path)), tmp_(path_ + ".tmp"), header_(std::move(header)) {
  header_.count = 0;
  f_ = std::fopen(tmp_.c_str(), "wb");
  if (!f_) throw CorpusError("cannot create '" + tmp_ + "'");
  const auto h = encode_corpus_header(header_);
  std::fwrite(h.data(), 1, h.size(), f_);
}

CorpusWriter::~CorpusWriter() {
  if (f_) {
    std::fclose(f_);
    std::remove(tmp_.c_str());
  }
}

void CorpusWriter::append(std::span<const std::uint8_t> hwc_pixels, int label) {
  if (hwc_pixels.size() != header_.pixel_bytes()) throw CorpusError("corpus record has the wrong size");
  if (header_.labeled && (label < 0 || label > 0xFFFF)) throw CorpusError("label out of u16 range");
  std::fwrite(hwc_pixels.data(), 1, hwc_pixels.size(), f_);
  if (header_.labeled) {
    const std::uint8_t lb[2] = {static_cast<std::uint8_t>(label & 0xFF), static_cast<std::uint8_t>(label >> 8)};
    std::fwrite(lb, 1, 2, f_);
  }
  ++header_.count;
}

void CorpusWriter::close() {
  if (!f_) return;
  const auto h = encode_corpus_header(header_);
  std::fseek(f_, 0, SEEK_SET);
  std::fwrite(h.data(), 1, h.size(), f_);
  const bool ok = std::fflush(f_) == 0 && !std::ferror(f_);
  std::fclose(f_);
  f_ = nullptr;
  if (!ok) throw CorpusError("write failed for '" + tmp_ + "'");
  std::filesystem::rename(tmp_, path_);
}

CorpusReader::CorpusReader(const std::string& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY);
  if (fd_ < 0) throw CorpusError("cannot open corpus '" + path + "'");
  const auto fsize = static_cast<std::uint64_t>(std::filesystem::file_size(path));
  std::uint8_t fixed[32];
  if (fsize < sizeof fixed) {
    ::close(fd_);
    throw CorpusError("'" + path + "' is too short to be a corpus");
  }
  pread_all(fd_, fixed, sizeof fixed, 0, path);
  if (std::memcmp(fixed, kMagic, 4) != 0) {
    ::close(fd_);
    throw CorpusError("'" + path + "' is not an HVC1 corpus (bad magic)");
  }
  header_.version = get_u32(fixed + 4);
  if (header_.version != kCorpusVersion) {
    ::close(fd_);
    throw CorpusError("'" + path + "': corpus version " + std::to_string(header_.version) +
                      ", this build reads version " + std::to_string(kCorpusVersion));
  }
  header_.count = get_u64(fixed + 8);
  header_.height = get_u32(fixed + 16);
  header_.width = get_u32(fixed + 20);
  header_.channels = get_u32(fixed + 24);
  header_.labeled = get_u32(fixed + 28) != 0;
  if (header_.channels == 0 || header_.channels > 16 || fsize < header_.header_bytes()) {
    ::close(fd_);
    throw CorpusError("'" + path + "': corrupt corpus header");
  }
  std::vector<std::uint8_t> stats(8 * header_.channels);
  pread_all(fd_, stats.data(), stats.size(), 32, path);
  for (std::uint32_t c = 0; c < header_.channels; ++c) {
    header_.mean.push_back(get_f32(&stats[4 * c]));
    header_.std.push_back(get_f32(&stats[4 * (header_.channels + c)]));
  }
  if (fsize != header_.file_bytes()) {
    ::close(fd_);
    throw CorpusError("'" + path + "': length " + std::to_string(fsize) + " bytes, header implies " +
                      std::to_string(header_.file_bytes()));
  }
}

CorpusReader::~CorpusReader() {
  if (fd_ >= 0) ::close(fd_);
}

int CorpusReader::read_record(std::int64_t i, std::span<std::uint8_t> pixels) const {
  if (i < 0 || i >= size()) throw CorpusError("record " + std::to_string(i) + " out of range");
  if (pixels.size() != header_.pixel_bytes()) throw CorpusError("record buffer has the wrong size");
  const std::uint64_t off = header_.header_bytes() + static_cast<std::uint64_t>(i) * header_.record_bytes();
  pread_all(fd_, pixels.data(), pixels.size(), off, path_);
  if (!header_.labeled) return 0;
  std::uint8_t lb[2];
  pread_all(fd_, lb, 2, off + header_.pixel_bytes(), path_);
  return lb[0] | (lb[1] << 8);
}

template <typename T>
void CorpusReader::load_batch(std::span<const std::int64_t> indices, std::span<T> out,
                              std::span<int> labels) const {
  const std::size_t h = header_.height, w = header_.width, c = header_.channels;
  if (out.size() != indices.size() * h * w * c) throw CorpusError("batch buffer has the wrong size");
  std::vector<std::uint8_t> rec(header_.pixel_bytes());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const int label = read_record(indices[b], rec);
    if (!labels.empty()) labels[b] = label;
    T* dst = out.data() + b * c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[(ch * h + y) * w + x] =
              static_cast<T>((rec[(y * w + x) * c + ch] / 255.0 - header_.mean[ch]) / header_.std[ch]);
  }
}

template void CorpusReader::load_batch<float>(std::span<const std::int64_t>, std::span<float>, std::span<int>) const;
template void CorpusReader::load_batch<double>(std::span<const std::int64_t>, std::span<double>, std::span<int>) const;

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "gaussian-blobs") return SynthKind::GaussianBlobs;
  if (name == "textures") return SynthKind::Textures;
  if (name == "labeled-shapes") return SynthKind::LabeledShapes;
  throw CorpusError("unknown synthetic kind '" + name + "' (gaussian-blobs, textures, labeled-shapes)");
}

const char* synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::GaussianBlobs: return "gaussian-blobs";
    case SynthKind::Textures: return "textures";
    case SynthKind::LabeledShapes: return "labeled-shapes";
  }
  return "?";
}

void synth_corpus(const std::string& path, std::int64_t n, int size, SynthKind kind,
                  std::uint64_t seed, int classes) {
  if (n < 1) throw CorpusError("synthetic corpus needs n >= 1");
  if (size < 1) throw CorpusError("synthetic corpus needs a positive image size");
  if (kind == SynthKind::LabeledShapes && (classes < 2 || classes > 6))
    throw CorpusError("labeled-shapes supports 2 to 6 classes");
  // Two passes over the same per-image seeds: statistics, then bytes.
  std::vector<double> img;
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size) * size * 3);
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  for (std::int64_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(image_seed(seed, static_cast<std::uint64_t>(i)));
    render(img, size, kind, rng, classes);
    for (std::size_t p = 0; p < img.size(); ++p) {
      const double v = to_byte(img[p]) / 255.0;
      sum[p % 3] += v;
      sq[p % 3] += v * v;
    }
  }
  CorpusHeader h;
  h.height = h.width = static_cast<std::uint32_t>(size);
  h.channels = 3;
  h.labeled = kind == SynthKind::LabeledShapes;
  const double cnt = static_cast<double>(n) * size * size;
  for (int c = 0; c < 3; ++c) {
    const double m = sum[c] / cnt;
    h.mean.push_back(static_cast<float>(m));
    h.std.push_back(static_cast<float>(std::max(std::sqrt(std::max(sq[c] / cnt - m * m, 0.0)), 1e-3)));
  }
  CorpusWriter w(path, h);
  for (std::int64_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(image_seed(seed, static_cast<std::uint64_t>(i)));
    const int label = render(img, size, kind, rng, classes);
    for (std::size_t p = 0; p < img.size(); ++p) bytes[p] = to_byte(img[p]);
    w.append(bytes, label);
  }
  w.close();
}

}  // namespace hivit
