#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sigma/tensor.hpp"

namespace sigma {

// On-disk container convention shared by shards and weight files: a single
// compact JSON header line, then little-endian float64 payloads in the order
// the header declares.

void write_f64_le(std::ostream& os, const double* values, std::size_t n);
void read_f64_le(std::istream& is, double* values, std::size_t n);

void write_json_line(std::ostream& os, const nlohmann::json& j);
nlohmann::json read_json_line(std::istream& is, const std::string& context);

// Named-tensor container (weight files).
void save_named_tensors(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace sigma
