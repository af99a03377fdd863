#include "kgedit/container.hpp"

#include <bit>
#include <type_traits>
#include <fstream>
#include <sstream>

#include "kgedit/error.hpp"

namespace kgedit::io {

namespace {

constexpr std::string_view kMagic = "KGEDCKPT";

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(value >> (8 * i))));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    static_assert(std::is_unsigned_v<T>);
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::string encode_container(const Container& container) {
  std::string out;
  out.append(kMagic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, container.manifest.size());
  out.append(container.manifest);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(container.arrays.size()));
  for (const auto& array : container.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(array.name.size()));
    out.append(array.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(array.dtype));
    const auto& shape = array.tensor.shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put<std::uint64_t>(out, d);
    for (double v : array.tensor.values()) {
      if (array.dtype == DType::f64) {
        put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      } else {
        put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("not a checkpoint container (bad magic)");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  Reader tail(bytes.substr(bytes.size() - 8));
  if (tail.get<std::uint64_t>() != fnv1a64(body)) {
    throw FormatError("checkpoint checksum mismatch (corrupt or truncated file)");
  }

  Reader r(body);
  r.take(kMagic.size());
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw FormatError("checkpoint container version " + std::to_string(version) +
                      " unsupported (expected " + std::to_string(kContainerVersion) + ")");
  }
  Container c;
  const auto manifest_len = r.get<std::uint64_t>();
  c.manifest = std::string(r.take(manifest_len));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t a = 0; a < count; ++a) {
    NamedArray array;
    const auto name_len = r.get<std::uint32_t>();
    array.name = std::string(r.take(name_len));
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw FormatError("unknown dtype tag " + std::to_string(dtype));
    array.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw FormatError("bad rank for array " + array.name);
    ad::Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>();
      if (d == 0 || d > (std::size_t{1} << 32)) throw FormatError("bad dimension in " + array.name);
      n *= d;
    }
    const std::size_t width = array.dtype == DType::f64 ? 8 : 4;
    if (n > r.remaining() / width) throw FormatError("checkpoint truncated in " + array.name);
    std::vector<double> values(n);
    for (auto& v : values) {
      v = array.dtype == DType::f64
              ? std::bit_cast<double>(r.get<std::uint64_t>())
              : static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>()));
    }
    array.tensor = ad::Tensor(std::move(shape), std::move(values));
    c.arrays.push_back(std::move(array));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last array");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace kgedit::io
