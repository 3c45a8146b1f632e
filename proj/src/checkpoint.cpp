#include "mgd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mgd {
namespace {

class Writer {
 public:
  void bytes(const void* src, std::size_t count) {
    const auto* p = static_cast<const std::uint8_t*>(src);
    out_.insert(out_.end(), p, p + count);
  }
  template <typename U>
  void uint(U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      out_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      value |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(value);
  }
  std::span<const std::uint8_t> take(std::size_t count, const char* what) {
    need(count, what);
    auto out = bytes_.subspan(pos_, count);
    pos_ += count;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t count, const char* what) const {
    if (bytes_.size() - pos_ < count) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > UINT16_MAX) throw CheckpointError("tensor name too long: " + t.name);
    if (t.shape.size() > UINT8_MAX) throw CheckpointError("tensor rank too large: " + t.name);
    if (numel(t.shape) != t.data.size()) {
      throw CheckpointError("tensor " + t.name + " data does not match shape " +
                            shape_str(t.shape));
    }
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.uint<std::uint64_t>(d);
    for (float v : t.data) w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  return w.take();
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic (expected MGDC)");
  }
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.uint<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.uint<std::uint16_t>("name length");
    const auto name = r.take(name_len, "name");
    t.name.assign(name.begin(), name.end());
    const auto rank = r.uint<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.uint<std::uint64_t>("dims"));
    const auto elements = numel(t.shape);
    t.data.resize(elements);
    for (auto& v : t.data) v = std::bit_cast<float>(r.uint<std::uint32_t>("tensor data"));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last checkpoint tensor");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

namespace {
std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(slurp(path));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const std::filesystem::path& path) { return fnv1a64(slurp(path)); }

}  // namespace mgd
