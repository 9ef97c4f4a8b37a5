#include "cdt/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cdt {

namespace {

static_assert(std::endian::native == std::endian::little,
              "framed payloads are written without byte swapping");

void append_json(const Json& j, std::string& out) {
  switch (j.type()) {
    case Json::value_t::null:
      out += "null";
      break;
    case Json::value_t::boolean:
      out += j.get<bool>() ? "true" : "false";
      break;
    case Json::value_t::string:
      out += Json(j.get<std::string>()).dump();
      break;
    case Json::value_t::number_integer:
      out += std::to_string(j.get<int64_t>());
      break;
    case Json::value_t::number_unsigned:
      out += std::to_string(j.get<uint64_t>());
      break;
    case Json::value_t::number_float:
      out += format_fixed(j.get<double>());
      break;
    case Json::value_t::array: {
      out += '[';
      bool first = true;
      for (const auto& item : j) {
        if (!first) out += ',';
        first = false;
        append_json(item, out);
      }
      out += ']';
      break;
    }
    case Json::value_t::object: {
      // nlohmann objects sit on std::map, so iteration is already sorted.
      out += '{';
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += Json(it.key()).dump();
        out += ':';
        append_json(it.value(), out);
      }
      out += '}';
      break;
    }
    default:
      throw ContractError("canonical_json: unsupported value type");
  }
}

}  // namespace

std::string format_fixed(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 6);
  if (res.ec != std::errc()) {
    throw NumericError("format_fixed: value not representable");
  }
  return std::string(buf, res.ptr);
}

std::string canonical_json(const Json& j) {
  std::string out;
  append_json(j, out);
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("read failed on " + path.string());
  return buf.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed on " + path.string());
}

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string content;
  auto append_row = [&content](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) content += ',';
      content += cells[i];
    }
    content += '\n';
  };
  append_row(header);
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw ContractError("write_csv: row with " + std::to_string(row.size()) +
                          " cells under a " + std::to_string(header.size()) +
                          "-column header");
    }
    append_row(row);
  }
  write_text_file(path, content);
}

void write_magic_json(std::ostream& out, const std::string& magic, const Json& header) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::string body = canonical_json(header);
  const uint64_t len = body.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed while emitting " + magic + " header");
}

Json read_magic_json(std::istream& in, const std::string& magic, const std::string& what) {
  std::string found(magic.size(), '\0');
  in.read(found.data(), static_cast<std::streamsize>(found.size()));
  if (!in || found != magic) {
    throw IoError(what + ": bad magic (expected \"" + magic + "\")");
  }
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError(what + ": truncated header length");
  if (len > (1ull << 30)) {
    throw IoError(what + ": implausible header length " + std::to_string(len));
  }
  std::string body(len, '\0');
  in.read(body.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(what + ": truncated header body");
  try {
    return Json::parse(body);
  } catch (const Json::parse_error& e) {
    throw IoError(what + ": header is not valid JSON (" + e.what() + ")");
  }
}

void write_f64(std::ostream& out, const double* data, int64_t n) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(double))));
  if (!out) throw IoError("write failed while emitting float64 payload");
}

void read_f64(std::istream& in, double* data, int64_t n, const std::string& what) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(double))));
  if (!in) throw IoError(what + ": truncated float64 payload");
}

void write_bytes(std::ostream& out, const uint8_t* data, int64_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed while emitting byte payload");
}

void read_bytes(std::istream& in, uint8_t* data, int64_t n, const std::string& what) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!in) throw IoError(what + ": truncated byte payload");
}

}  // namespace cdt
