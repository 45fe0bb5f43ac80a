#include "codecsep/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace codecsep {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw FormatError("truncated container at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorBundle::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw FormatError("bundle has no tensor named '" + name + "'");
}

bool TensorBundle::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle, Dtype dtype) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kContainerVersion);
  w.str(bundle.config.dump());
  w.u32(static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& [name, value] : bundle.tensors) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(dtype));
    w.u32(static_cast<std::uint32_t>(value.rank()));
    for (auto e : value.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : value.data()) {
      if (dtype == Dtype::f32)
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        w.u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  return w.take();
}

TensorBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.raw(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("bad magic bytes");
  const auto version = r.u32();
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  TensorBundle bundle;
  try {
    bundle.config = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config block is not valid JSON: ") + e.what());
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.str();
    const auto dtype = r.u8();
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype));
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank for '" + nt.name + "'");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.u32();
      if (e == 0) throw FormatError("zero extent in tensor '" + nt.name + "'");
      n *= e;
    }
    const std::size_t width = dtype == 0 ? 4 : 8;
    r.need(n * width);
    std::vector<double> values(n);
    for (auto& v : values) {
      if (dtype == 0)
        v = static_cast<double>(std::bit_cast<float>(r.u32()));
      else
        v = std::bit_cast<double>(r.u64());
    }
    nt.value = Tensor::from(std::move(shape), std::move(values));
    bundle.tensors.push_back(std::move(nt));
  }
  if (!r.done()) throw FormatError("trailing bytes after tensor records");
  return bundle;
}

void save_bundle(const std::filesystem::path& path, const TensorBundle& bundle, Dtype dtype) {
  const auto bytes = encode_bundle(bundle, dtype);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes);
}

std::uint64_t config_hash(const nlohmann::json& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace codecsep
