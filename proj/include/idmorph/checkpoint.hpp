#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "idmorph/tensor.hpp"

// Binary container: "MGCK", u32 version, u32 entry count, then per entry
// u32 name length, name bytes, u8 dtype, u32 rank, u64 dims, payload.
// All integers and payloads are little-endian.

namespace idmorph {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u64 = 2, u8 = 3 };

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::u8;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;  // raw little-endian bytes
};

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}
template <>
constexpr DType dtype_of<std::uint64_t>() {
  return DType::u64;
}
template <>
constexpr DType dtype_of<std::uint8_t>() {
  return DType::u8;
}

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, const std::vector<std::uint64_t>& dims, std::span<const T> values);

  template <typename T>
  void put(const std::string& name, std::span<const T> values) {
    put<T>(name, {values.size()}, values);
  }
  void put_u64(const std::string& name, std::uint64_t v) { put<std::uint64_t>(name, std::span<const std::uint64_t>(&v, 1)); }
  void put_string(const std::string& name, const std::string& s);

  bool contains(const std::string& name) const { return find(name) != nullptr; }
  const CheckpointEntry& entry(const std::string& name) const;

  /// Values of `name`; DataError when missing, FormatError on dtype mismatch.
  template <typename T>
  std::vector<T> get(const std::string& name) const;
  std::uint64_t get_u64(const std::string& name) const;
  std::string get_string(const std::string& name) const;

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint& other) const;

 private:
  const CheckpointEntry* find(const std::string& name) const;
  CheckpointEntry& slot(const std::string& name);

  std::vector<CheckpointEntry> entries_;
};

}  // namespace idmorph
