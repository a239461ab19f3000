#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

#include "fsad/tensor.hpp"

namespace fsad {

/// Self-describing binary container: an 8-byte magic, a little-endian
/// u64 header length, a JSON header (kind, metadata, array index) and the
/// raw float64 payload. Byte output is a pure function of the contents.
class Archive {
 public:
  Archive() = default;
  explicit Archive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void put(const std::string& name, Tensor value);
  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  const std::map<std::string, Tensor>& arrays() const { return arrays_; }

  std::string serialize() const;
  static Archive deserialize(std::string_view bytes);

  /// Writes with exclusive creation; fails if the file already exists.
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
  /// Loads and checks the archive kind.
  static Archive load(const std::filesystem::path& path, std::string_view expected_kind);

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, Tensor> arrays_;
};

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
/// Creates `path` exclusively (O_EXCL semantics) and writes `bytes`.
void write_file_exclusive(const std::filesystem::path& path, std::string_view bytes);

}  // namespace fsad
