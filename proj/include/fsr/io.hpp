#pragma once

#include "fsr/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fsr::io {

using Json = nlohmann::json;
namespace fs = std::filesystem;

using NamedTensor = std::pair<std::string, Matrix>;

// Binary artifact: a magic line, a single-line JSON header, then every tensor
// as little-endian float32 in row-major order. The header's "tensors" array
// records name/rows/cols in payload order.
struct Container {
  Json header;
  std::vector<NamedTensor> tensors;

  const Matrix& tensor(std::string_view name) const;
  bool has(std::string_view name) const;
};

void write_container(const fs::path& path, Json header, const std::vector<NamedTensor>& tensors);
Container read_container(const fs::path& path);

Json read_json(const fs::path& path);
void write_json(const fs::path& path, const Json& value);
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

// Vectors travel through JSON as plain arrays.
Vector to_vector(const Json& array);
Json to_json(const Vector& v);

// Config objects reject fields they do not know; `where` prefixes the message.
void reject_unknown_keys(const Json& j, const std::vector<std::string>& known, const std::string& where);
// Same, with the keys of a serialized default config as the known set.
void reject_keys_outside(const Json& j, const Json& schema, const std::string& where);

}  // namespace fsr::io
