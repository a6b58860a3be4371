#include "gmoe/io/png.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "gmoe/data/container.hpp"  // crc32
#include "gmoe/error.hpp"

namespace gmoe {
namespace {

void put_u32be(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32be(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32be(out, crc32(body.data(), body.size()));
}

std::uint32_t adler32(const unsigned char* p, std::size_t len) {
  std::uint32_t a = 1, b = 0;
  for (std::size_t i = 0; i < len; ++i) {
    a = (a + p[i]) % 65521u;
    b = (b + a) % 65521u;
  }
  return (b << 16) | a;
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, std::size_t width,
                   std::size_t height, const std::uint8_t* rgb) {
  if (width == 0 || height == 0) throw IoError("png: empty image");

  // Filter byte 0 in front of every scanline.
  std::vector<unsigned char> raw;
  raw.reserve(height * (1 + 3 * width));
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), rgb + y * 3 * width, rgb + (y + 1) * 3 * width);
  }

  // zlib wrapper with stored (uncompressed) deflate blocks.
  std::string z;
  z.push_back(0x78);
  z.push_back(0x01);
  std::size_t off = 0;
  while (off < raw.size()) {
    const std::size_t take = std::min<std::size_t>(65535, raw.size() - off);
    const bool final = off + take == raw.size();
    z.push_back(final ? 1 : 0);
    z.push_back(static_cast<char>(take & 0xFF));
    z.push_back(static_cast<char>((take >> 8) & 0xFF));
    z.push_back(static_cast<char>(~take & 0xFF));
    z.push_back(static_cast<char>((~take >> 8) & 0xFF));
    z.append(reinterpret_cast<const char*>(raw.data() + off),
             static_cast<std::size_t>(take));
    off += take;
  }
  put_u32be(z, adler32(raw.data(), raw.size()));

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(width));
  put_u32be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // rgb
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", "");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(png.data(), static_cast<std::streamsize>(png.size()));
  if (!out) throw IoError("short write: " + path.string());
}

void write_heatmap_png(const std::filesystem::path& path,
                       const std::vector<std::vector<double>>& matrix,
                       std::size_t cell_px) {
  if (matrix.empty() || matrix[0].empty()) throw IoError("heatmap: empty matrix");
  const std::size_t rows = matrix.size(), cols = matrix[0].size();
  double lo = matrix[0][0], hi = matrix[0][0];
  for (const auto& r : matrix) {
    if (r.size() != cols) throw IoError("heatmap: ragged matrix");
    for (double v : r) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;

  // Dark blue -> teal -> yellow ramp.
  auto ramp = [](double t, std::uint8_t* px) {
    t = std::clamp(t, 0.0, 1.0);
    px[0] = static_cast<std::uint8_t>(std::lround(255 * std::pow(t, 1.3)));
    px[1] = static_cast<std::uint8_t>(std::lround(255 * std::pow(t, 0.7)));
    px[2] = static_cast<std::uint8_t>(std::lround(96 + 120 * (1.0 - t)));
  };

  const std::size_t w = cols * cell_px, h = rows * cell_px;
  std::vector<std::uint8_t> rgb(3 * w * h);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      std::uint8_t px[3];
      ramp((matrix[r][c] - lo) / span, px);
      for (std::size_t y = r * cell_px; y < (r + 1) * cell_px; ++y)
        for (std::size_t x = c * cell_px; x < (c + 1) * cell_px; ++x)
          std::memcpy(&rgb[3 * (y * w + x)], px, 3);
    }
  write_png_rgb(path, w, h, rgb.data());
}

}  // namespace gmoe
