#include "fsad/archive.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace fsad {
namespace {

constexpr std::string_view kMagic = "FSADARC1";

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

void append_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

void Archive::put(const std::string& name, Tensor value) { arrays_[name] = std::move(value); }

const Tensor& Archive::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ArchiveError("archive '" + kind_ + "' has no array '" + name + "'");
  return it->second;
}

std::string Archive::serialize() const {
  nlohmann::json header;
  header["kind"] = kind_;
  header["meta"] = meta_;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : arrays_) {
    header["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const std::string head = header.dump();
  std::string out(kMagic);
  append_u64(out, head.size());
  out += head;
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& [name, t] : arrays_) {
    out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(double));
  }
  return out;
}

Archive Archive::deserialize(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw ArchiveError("not an fsad archive (bad magic)");
  }
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + kMagic.size(), 8);
  const std::size_t payload_start = kMagic.size() + 8 + head_len;
  if (payload_start > bytes.size()) throw ArchiveError("truncated archive header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kMagic.size() + 8, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("corrupt archive header: ") + e.what());
  }
  Archive a(header.at("kind").get<std::string>());
  a.meta_ = header.at("meta");
  const std::size_t payload_doubles = (bytes.size() - payload_start) / sizeof(double);
  for (const auto& entry : header.at("arrays")) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (offset + n > payload_doubles) throw ArchiveError("truncated archive payload");
    std::vector<double> values(n);
    std::memcpy(values.data(), bytes.data() + payload_start + offset * sizeof(double), n * sizeof(double));
    a.arrays_[entry.at("name").get<std::string>()] = Tensor(std::move(shape), std::move(values));
  }
  return a;
}

void Archive::save(const std::filesystem::path& path) const { write_file_exclusive(path, serialize()); }

Archive Archive::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

Archive Archive::load(const std::filesystem::path& path, std::string_view expected_kind) {
  Archive a = load(path);
  if (a.kind() != expected_kind) {
    throw ArchiveError(path.string() + ": expected archive kind '" + std::string(expected_kind) + "', found '" +
                       a.kind() + "'");
  }
  return a;
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

void write_file_exclusive(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, decltype(&std::fclose)> f(std::fopen(path.c_str(), "wbx"), &std::fclose);
  if (!f) {
    if (std::filesystem::exists(path)) throw ArchiveError("refusing to overwrite existing artifact " + path.string());
    throw ArchiveError("cannot create " + path.string());
  }
  if (std::fwrite(bytes.data(), 1, bytes.size(), f.get()) != bytes.size()) {
    throw ArchiveError("short write to " + path.string());
  }
}

}  // namespace fsad
