#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cdt/common.hpp"
#include "json.hpp"

namespace cdt {

using Json = nlohmann::json;

// Six fixed decimals, locale-independent.  All floats that land in
// reports, CSV tables and framed headers go through this so reruns are
// byte-identical.
std::string format_fixed(double v);

// Compact serialization with object keys in sorted order and every float
// rendered via format_fixed.
std::string canonical_json(const Json& j);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Framed binary layout shared by datasets and checkpoints: ASCII magic,
// little-endian uint64 header length, header JSON bytes, then raw
// little-endian float64 payload (plus format-specific trailing bytes).
void write_magic_json(std::ostream& out, const std::string& magic, const Json& header);
Json read_magic_json(std::istream& in, const std::string& magic, const std::string& what);
void write_f64(std::ostream& out, const double* data, int64_t n);
void read_f64(std::istream& in, double* data, int64_t n, const std::string& what);
void write_bytes(std::ostream& out, const uint8_t* data, int64_t n);
void read_bytes(std::istream& in, uint8_t* data, int64_t n, const std::string& what);

}  // namespace cdt
