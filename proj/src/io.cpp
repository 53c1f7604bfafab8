#include "sigma/io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sigma/errors.hpp"

namespace sigma {

void write_f64_le(std::ostream& os, const double* values, std::size_t n) {
  std::vector<char> buf(n * 8);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write of float payload");
}

void read_f64_le(std::istream& is, double* values, std::size_t n) {
  std::vector<char> buf(n * 8);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
    throw IoError("short read of float payload");
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + b])) << (8 * b);
    }
    std::memcpy(&values[i], &bits, 8);
  }
}

void write_json_line(std::ostream& os, const nlohmann::json& j) {
  os << j.dump() << '\n';
  if (!os) throw IoError("failed to write header line");
}

nlohmann::json read_json_line(std::istream& is, const std::string& context) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing header line in " + context);
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded()) throw IntegrityError("malformed header in " + context);
  return j;
}

void save_named_tensors(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  nlohmann::json header;
  header["magic"] = "sigma-tensors-v1";
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& [name, tensor] : tensors) {
    fields.push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  header["tensors"] = fields;
  write_json_line(os, header);
  for (const auto& [name, tensor] : tensors) {
    write_f64_le(os, tensor.data().data(), tensor.size());
  }
  if (!os) throw IoError("failed to write " + path.string());
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json header = read_json_line(is, path.string());
  if (header.value("magic", "") != "sigma-tensors-v1") {
    throw IntegrityError("bad magic in " + path.string());
  }
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& field : header.at("tensors")) {
    std::vector<std::size_t> shape = field.at("shape").get<std::vector<std::size_t>>();
    Tensor t(shape);
    try {
      read_f64_le(is, t.data().data(), t.size());
    } catch (const IoError&) {
      throw IntegrityError("truncated tensor payload in " + path.string());
    }
    out.emplace_back(field.at("name").get<std::string>(), std::move(t));
  }
  // Trailing bytes mean the header and payload disagree.
  char probe = 0;
  is.read(&probe, 1);
  if (is.gcount() != 0) throw IntegrityError("trailing bytes in " + path.string());
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << content;
  if (!os) throw IoError("failed to write " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw IntegrityError("malformed JSON in " + path.string());
  return j;
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace sigma
