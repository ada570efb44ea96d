#include "remem/png.hpp"

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>

#include <zlib.h>

#include "remem/error.hpp"
#include "remem/gtf.hpp"

namespace remem::png {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>(v & 0xFF));
}

void put_chunk(std::string& out, const char* type, const std::string& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::uint8_t to_byte(float x) {
  const double scaled = (static_cast<double>(x) + 1.0) * 127.5;
  const double r = std::nearbyint(std::clamp(scaled, 0.0, 255.0));
  return static_cast<std::uint8_t>(r);
}

std::string encode(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ValidationError("png: expected a 3 x H x W image");
  if (std::fegetround() != FE_TONEAREST) throw NumericalError("png: rounding mode must be round-to-nearest");
  const int h = image.dim(1), w = image.dim(2);
  std::string raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * w));
  for (int y = 0; y < h; ++y) {
    raw.push_back('\0');
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) raw.push_back(static_cast<char>(to_byte(image.at(c, y, x))));
  }
  uLongf zsize = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zsize, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zsize, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw Error("png: zlib compression failed");
  }
  z.resize(zsize);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(w));
  put_u32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit, RGB, deflate, no filter, no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", "");
  return out;
}

void write(const std::filesystem::path& path, const Tensor& image) { gtf::write_bytes(path, encode(image)); }

Tensor contact_sheet(const std::vector<Tensor>& images, int columns) {
  if (images.empty() || columns < 1) throw ValidationError("contact_sheet: nothing to tile");
  const int h = images[0].dim(1), w = images[0].dim(2);
  for (const auto& im : images)
    if (im.shape != images[0].shape) throw ValidationError("contact_sheet: images differ in shape");
  const int n = static_cast<int>(images.size());
  const int cols = std::min(columns, n);
  const int rows = (n + cols - 1) / cols;
  Tensor sheet({3, rows * (h + 1) - 1, cols * (w + 1) - 1}, -1.0f);
  for (int i = 0; i < n; ++i) {
    const int oy = (i / cols) * (h + 1), ox = (i % cols) * (w + 1);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) sheet.at(c, oy + y, ox + x) = images[static_cast<std::size_t>(i)].at(c, y, x);
  }
  return sheet;
}

}  // namespace remem::png
