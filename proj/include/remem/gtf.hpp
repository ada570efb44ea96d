#pragma once

// GTF v1 container: a one-line UTF-8 JSON header, the two bytes "\n\0", then a
// little-endian float32 blob. The header carries magic "GTFv1", a kind tag,
// optional architecture and metadata, and a tensor manifest with byte offsets.

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "remem/generator.hpp"
#include "remem/tensor.hpp"

namespace remem::gtf {

inline constexpr const char* kMagic = "GTFv1";
inline constexpr int kVersion = 1;

struct Container {
  std::string kind;
  nlohmann::json architecture;  // null unless kind == "generator"
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::string serialize(const Container& c);
Container parse(std::string_view bytes);

void write_file(const std::filesystem::path& path, const Container& c);
Container read_file(const std::filesystem::path& path);

Container from_generator(const Generator& gen);
Generator to_generator(const Container& c);

void save_fixture(const Generator& gen, const std::filesystem::path& path);
Generator load_fixture(const std::filesystem::path& path);

/// FNV-1a 64-bit, 16 lowercase hex digits.
std::string content_hash(std::string_view bytes);
/// Hash of the generator's canonical GTF serialization.
std::string generator_hash(const Generator& gen);

std::string read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace remem::gtf
