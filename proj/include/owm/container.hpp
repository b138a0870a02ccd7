#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "owm/errors.hpp"

// "OWM1" named-array container shared by datasets and checkpoints.
//
//   magic "OWM1" | u16 version | u32 record count | records...
//   record: u16 name length | name bytes | u8 dtype | u8 rank | u32 extents[rank] | payload
//
// All integers and payloads are little-endian.
namespace owm::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'O', 'W', 'M', '1'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t { F32 = 0, U8 = 1, I64 = 2 };

inline std::size_t dtype_width(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::U8: return 1;
    case DType::I64: return 8;
  }
  throw InputError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

struct Record {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::variant<std::vector<float>, std::vector<std::uint8_t>, std::vector<std::int64_t>> data;

  DType dtype() const { return static_cast<DType>(data.index()); }

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto e : extents) n *= e;
    return n;
  }

  template <class T>
  const std::vector<T>& as() const {
    if (const auto* v = std::get_if<std::vector<T>>(&data)) return *v;
    throw InputError("record '" + name + "' has unexpected dtype");
  }

  friend bool operator==(const Record&, const Record&) = default;
};

/// Ordered set of uniquely named records.
class Container {
 public:
  template <class T>
  void put(const std::string& name, std::vector<std::uint32_t> extents, std::vector<T> values) {
    Record r{name, std::move(extents), std::move(values)};
    if (r.element_count() != std::visit([](const auto& v) { return v.size(); }, r.data)) {
      throw StructuralError("container: record '" + name + "' extents do not match its element count");
    }
    if (name.empty() || name.size() > 0xFFFF) throw StructuralError("container: bad record name length");
    if (r.extents.size() > 0xFF) throw StructuralError("container: rank too large for '" + name + "'");
    if (index_.count(name)) throw StructuralError("container: duplicate record name '" + name + "'");
    index_[name] = records_.size();
    records_.push_back(std::move(r));
  }

  void put_text(const std::string& name, const std::string& text) {
    put(name, {static_cast<std::uint32_t>(text.size())}, std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  void put_scalar(const std::string& name, std::int64_t v) { put(name, {1}, std::vector<std::int64_t>{v}); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Record& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("container: missing record '" + name + "'");
    return records_[it->second];
  }

  std::string text(const std::string& name) const {
    const auto& v = get(name).as<std::uint8_t>();
    return std::string(v.begin(), v.end());
  }

  std::int64_t scalar(const std::string& name) const {
    const auto& v = get(name).as<std::int64_t>();
    if (v.size() != 1) throw InputError("container: record '" + name + "' is not a scalar");
    return v[0];
  }

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  friend bool operator==(const Container& a, const Container& b) { return a.records_ == b.records_; }

  std::string serialize() const {
    std::string out(kMagic, 4);
    append(out, kVersion);
    append(out, static_cast<std::uint32_t>(records_.size()));
    for (const auto& r : records_) {
      append(out, static_cast<std::uint16_t>(r.name.size()));
      out += r.name;
      append(out, static_cast<std::uint8_t>(r.dtype()));
      append(out, static_cast<std::uint8_t>(r.extents.size()));
      for (auto e : r.extents) append(out, e);
      std::visit(
          [&](const auto& v) {
            out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(v[0]));
          },
          r.data);
    }
    return out;
  }

  static Container parse(const std::string& bytes, const std::string& origin = "<memory>") {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (bytes.size() - pos < n) throw InputError(origin + ": truncated container at byte " + std::to_string(pos));
    };
    auto read = [&]<class T>(T& v) {
      need(sizeof(T));
      std::memcpy(&v, bytes.data() + pos, sizeof(T));
      pos += sizeof(T);
    };
    need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw InputError(origin + ": bad magic, not an OWM1 container");
    pos = 4;
    std::uint16_t version = 0;
    std::uint32_t count = 0;
    read(version);
    if (version != kVersion) throw InputError(origin + ": unsupported container version " + std::to_string(version));
    read(count);
    Container c;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint16_t name_len = 0;
      read(name_len);
      need(name_len);
      std::string name = bytes.substr(pos, name_len);
      pos += name_len;
      std::uint8_t code = 0, rank = 0;
      read(code);
      read(rank);
      std::vector<std::uint32_t> extents(rank);
      for (auto& e : extents) read(e);
      std::size_t n = 1;
      for (auto e : extents) n *= e;
      const auto dtype = static_cast<DType>(code);
      const std::size_t bytes_needed = n * dtype_width(dtype);
      need(bytes_needed);
      const char* src = bytes.data() + pos;
      pos += bytes_needed;
      auto load = [&]<class T>(std::vector<T> v) {
        std::memcpy(v.data(), src, bytes_needed);
        c.put(name, std::move(extents), std::move(v));
      };
      switch (dtype) {
        case DType::F32: load(std::vector<float>(n)); break;
        case DType::U8: load(std::vector<std::uint8_t>(n)); break;
        case DType::I64: load(std::vector<std::int64_t>(n)); break;
      }
    }
    if (pos != bytes.size()) throw InputError(origin + ": trailing bytes after last record");
    return c;
  }

 private:
  template <class T>
  static void append(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  std::vector<Record> records_;
  std::map<std::string, std::size_t> index_;
};

/// Writes to a sibling temp file and renames it into place, so a failed
/// write never leaves a partial file at `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      f.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write to '" + tmp.string() + "' failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void save(const Container& c, const std::filesystem::path& path) { write_file_atomic(path, c.serialize()); }

inline Container load(const std::filesystem::path& path) { return Container::parse(read_file(path), path.string()); }

}  // namespace owm::io
