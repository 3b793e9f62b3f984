#include "idmorph/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace idmorph {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'G', 'C', 'K'};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("checkpoint: unknown dtype tag " + std::to_string(int(t)));
}

template <typename U>
void append(std::vector<std::uint8_t>& out, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename U>
  U take() {
    U v;
    std::memcpy(&v, need(sizeof(U)), sizeof(U));
    return v;
  }
  const std::uint8_t* need(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                            std::to_string(n) + " more)");
    }
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

CheckpointEntry& Checkpoint::slot(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e;
  entries_.push_back({name, DType::u8, {}, {}});
  return entries_.back();
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
  const auto* e = find(name);
  if (!e) throw DataError("checkpoint has no entry '" + name + "'");
  return *e;
}

template <typename T>
void Checkpoint::put(const std::string& name, const std::vector<std::uint64_t>& dims, std::span<const T> values) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (n != values.size()) throw DimensionError("checkpoint entry '" + name + "': dims do not match value count");
  auto& e = slot(name);
  e.dtype = dtype_of<T>();
  e.dims = dims;
  e.payload.resize(values.size() * sizeof(T));
  if (!values.empty()) std::memcpy(e.payload.data(), values.data(), e.payload.size());
}

void Checkpoint::put_string(const std::string& name, const std::string& s) {
  put<std::uint8_t>(name, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

template <typename T>
std::vector<T> Checkpoint::get(const std::string& name) const {
  const auto& e = entry(name);
  if (e.dtype != dtype_of<T>()) {
    throw FormatError("checkpoint entry '" + name + "' has dtype tag " + std::to_string(int(e.dtype)) +
                      ", expected " + std::to_string(int(dtype_of<T>())));
  }
  std::vector<T> out(e.payload.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), e.payload.data(), e.payload.size());
  return out;
}

std::uint64_t Checkpoint::get_u64(const std::string& name) const {
  auto v = get<std::uint64_t>(name);
  if (v.size() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
  return v[0];
}

std::string Checkpoint::get_string(const std::string& name) const {
  auto v = get<std::uint8_t>(name);
  return std::string(v.begin(), v.end());
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  append<std::uint32_t>(out, kCheckpointVersion);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    append<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    append<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    append<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) append<std::uint64_t>(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.take<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.take<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.take<std::uint32_t>();
    const auto* name = r.need(len);
    e.name.assign(reinterpret_cast<const char*>(name), len);
    const auto tag = r.take<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(DType::u8)) {
      throw CorruptionError("checkpoint entry '" + e.name + "' has unknown dtype tag " + std::to_string(tag));
    }
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.take<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.take<std::uint64_t>());
      n *= e.dims.back();
    }
    const std::uint64_t size = n * dtype_size(e.dtype);
    if (size > bytes.size()) throw CorruptionError("checkpoint entry '" + e.name + "' claims an impossible size");
    const auto* payload = r.need(static_cast<std::size_t>(size));
    e.payload.assign(payload, payload + size);
    ck.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw CorruptionError("checkpoint has trailing bytes after entry " + std::to_string(count));
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto &a = entries_[i], &b = other.entries_[i];
    if (a.name != b.name || a.dtype != b.dtype || a.dims != b.dims || a.payload != b.payload) return false;
  }
  return true;
}

#define IDMORPH_INSTANTIATE(T)                                                                        \
  template void Checkpoint::put<T>(const std::string&, const std::vector<std::uint64_t>&, std::span<const T>); \
  template std::vector<T> Checkpoint::get<T>(const std::string&) const;

IDMORPH_INSTANTIATE(float)
IDMORPH_INSTANTIATE(double)
IDMORPH_INSTANTIATE(std::uint64_t)
IDMORPH_INSTANTIATE(std::uint8_t)

}  // namespace idmorph
