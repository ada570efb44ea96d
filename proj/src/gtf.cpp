#include "remem/gtf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "remem/error.hpp"

namespace remem::gtf {

using nlohmann::json;

namespace {

void append_floats(std::string& out, const std::vector<float>& data) {
  const std::size_t start = out.size();
  out.resize(start + data.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, data.data(), data.size() * 4);
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint32_t u;
      std::memcpy(&u, &data[i], 4);
      for (int b = 0; b < 4; ++b) out[start + i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFF);
    }
  }
}

std::vector<float> read_floats(const char* src, std::size_t count) {
  std::vector<float> data(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(data.data(), src, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      std::memcpy(&data[i], &u, 4);
    }
  }
  return data;
}

}  // namespace

const Tensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("GTF container has no tensor '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

std::string serialize(const Container& c) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    const std::size_t length = t.size() * 4;
    manifest.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"length", length}});
    offset += length;
  }
  json header = {{"magic", kMagic},
                 {"version", kVersion},
                 {"kind", c.kind},
                 {"architecture", c.architecture},
                 {"metadata", c.metadata},
                 {"tensors", manifest},
                 {"blob_length", offset}};
  std::string out = header.dump();
  out.push_back('\n');
  out.push_back('\0');
  for (const auto& [name, t] : c.tensors) append_floats(out, t.data);
  return out;
}

Container parse(std::string_view bytes) {
  const auto sep = bytes.find(std::string_view("\n\0", 2));
  if (sep == std::string_view::npos) throw FormatError("GTF: malformed header (no header terminator)");
  json header;
  try {
    header = json::parse(bytes.substr(0, sep));
  } catch (const json::exception& e) {
    throw FormatError(std::string("GTF: malformed header JSON: ") + e.what());
  }
  if (!header.is_object() || header.value("magic", "") != kMagic) throw FormatError("GTF: bad magic, expected GTFv1");
  if (header.value("version", -1) != kVersion) {
    throw FormatError("GTF: version mismatch, file has " + header["version"].dump() + ", reader supports 1");
  }
  const std::string_view blob = bytes.substr(sep + 2);
  Container c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.architecture = header.value("architecture", json());
    c.metadata = header.value("metadata", json::object());
    const auto declared = header.at("blob_length").get<std::size_t>();
    if (declared != blob.size()) {
      throw FormatError("GTF: blob is " + std::to_string(blob.size()) + " bytes, header declares " +
                        std::to_string(declared) + " (truncated or padded file)");
    }
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<int>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      const std::size_t count = Tensor::element_count(shape);
      if (length != count * 4) throw FormatError("GTF: tensor '" + name + "' length does not match its shape");
      if (offset + length > blob.size()) throw FormatError("GTF: tensor '" + name + "' runs past the blob");
      Tensor t;
      t.shape = shape;
      t.data = read_floats(blob.data() + offset, count);
      c.tensors.emplace_back(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("GTF: malformed header field: ") + e.what());
  }
  return c;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write file: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_file(const std::filesystem::path& path, const Container& c) { write_bytes(path, serialize(c)); }

Container read_file(const std::filesystem::path& path) { return parse(read_bytes(path)); }

Container from_generator(const Generator& gen) {
  gen.validate();
  Container c;
  c.kind = "generator";
  json layers = json::array();
  for (std::size_t i = 0; i < gen.layers.size(); ++i) {
    const auto& l = gen.layers[i];
    layers.push_back({{"in", l.in_channels()},
                      {"out", l.out_channels()},
                      {"kernel", {l.kh(), l.kw()}},
                      {"upsample", l.upsample},
                      {"nonlinearity", to_string(l.act)}});
    c.add("layers." + std::to_string(i) + ".weight", l.weight);
    c.add("layers." + std::to_string(i) + ".bias", l.bias);
  }
  c.architecture = {{"latent_dim", gen.latent_dim}, {"base_size", gen.base_size}, {"layers", layers}};
  return c;
}

Generator to_generator(const Container& c) {
  if (c.kind != "generator") throw FormatError("GTF: expected kind 'generator', got '" + c.kind + "'");
  Generator g;
  try {
    g.latent_dim = c.architecture.at("latent_dim").get<int>();
    g.base_size = c.architecture.at("base_size").get<int>();
    const auto& layers = c.architecture.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerSpec l;
      l.act = nonlinearity_from_string(layers[i].at("nonlinearity").get<std::string>());
      l.upsample = layers[i].at("upsample").get<int>();
      l.weight = c.get("layers." + std::to_string(i) + ".weight");
      l.bias = c.get("layers." + std::to_string(i) + ".bias");
      g.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("GTF: malformed architecture: ") + e.what());
  }
  try {
    g.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("GTF: inconsistent generator: ") + e.what());
  }
  return g;
}

void save_fixture(const Generator& gen, const std::filesystem::path& path) { write_file(path, from_generator(gen)); }

Generator load_fixture(const std::filesystem::path& path) { return to_generator(read_file(path)); }

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

std::string generator_hash(const Generator& gen) { return content_hash(serialize(from_generator(gen))); }

}  // namespace remem::gtf
