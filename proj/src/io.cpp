#include "fsr/io.hpp"

#include "fsr/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fsr::io {

namespace {

constexpr std::string_view kMagic = "FSRC1\n";

void put_f32(std::string& out, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  float value;
  std::memcpy(&value, &bits, sizeof value);
  return value;
}

}  // namespace

const Matrix& Container::tensor(std::string_view name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw DataError("container has no tensor '" + std::string(name) + "'");
}

bool Container::has(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.first == name; });
}

void write_container(const fs::path& path, Json header, const std::vector<NamedTensor>& tensors) {
  Json index = Json::array();
  std::size_t total = 0;
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    total += static_cast<std::size_t>(m.size());
  }
  header["tensors"] = index;

  std::string out(kMagic);
  out += header.dump();
  out.push_back('\n');
  out.reserve(out.size() + 4 * total);
  for (const auto& [name, m] : tensors)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f32(out, static_cast<float>(m(r, c)));
  write_text(path, out);
}

Container read_container(const fs::path& path) {
  const std::string bytes = read_text(path);
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) throw DataError(path.string() + ": not an artifact container");
  const auto eol = bytes.find('\n', kMagic.size());
  if (eol == std::string::npos) throw DataError(path.string() + ": truncated header");

  Container c;
  try {
    c.header = Json::parse(bytes.substr(kMagic.size(), eol - kMagic.size()));
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  }
  std::size_t offset = eol + 1;
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  for (const auto& entry : c.header.at("tensors")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (offset + 4 * static_cast<std::size_t>(rows * cols) > bytes.size())
      throw DataError(path.string() + ": truncated payload");
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index col = 0; col < cols; ++col, offset += 4) m(r, col) = get_f32(base + offset);
    c.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  if (offset != bytes.size()) throw DataError(path.string() + ": trailing bytes after payload");
  return c;
}

Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const Json& value) { write_text(path, value.dump(2) + "\n"); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xF]);
  }
  return hex;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

Vector to_vector(const Json& array) {
  Vector v(static_cast<Eigen::Index>(array.size()));
  for (std::size_t i = 0; i < array.size(); ++i) v(static_cast<Eigen::Index>(i)) = array[i].get<double>();
  return v;
}

Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

void reject_unknown_keys(const Json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError(where + "." + key + ": unknown field");
}

void reject_keys_outside(const Json& j, const Json& schema, const std::string& where) {
  std::vector<std::string> known;
  for (const auto& [key, value] : schema.items()) known.push_back(key);
  reject_unknown_keys(j, known, where);
}

}  // namespace fsr::io
