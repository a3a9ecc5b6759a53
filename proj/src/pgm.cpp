#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "ran/glyph.hpp"

namespace ran::glyph {

namespace {

// Reads the next header integer, skipping whitespace and '#' comments.
bool next_header_int(const std::vector<std::uint8_t>& buf, std::size_t& pos, long& value) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= buf.size() || !std::isdigit(buf[pos])) return false;
  value = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    value = value * 10 + (buf[pos++] - '0');
    if (value > (1L << 24)) return false;
  }
  return true;
}

}  // namespace

std::vector<std::uint8_t> encode_pgm(const GlyphImage& img) {
  const std::string header =
      "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels().size());
  for (float p : img.pixels()) {
    const float clamped = std::clamp(p, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(clamped * 255.0f)));
  }
  return out;
}

void write_pgm(const GlyphImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw GlyphError(GlyphErrc::bad_image, "cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw GlyphError(GlyphErrc::bad_image, "short write to " + path.string());
}

GlyphImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw GlyphError(GlyphErrc::bad_image, "cannot open image " + path.string());
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5')
    throw GlyphError(GlyphErrc::bad_image, path.string() + ": not a binary PGM (P5)");

  std::size_t pos = 2;
  long width = 0, height = 0, maxval = 0;
  if (!next_header_int(buf, pos, width) || !next_header_int(buf, pos, height) || !next_header_int(buf, pos, maxval))
    throw GlyphError(GlyphErrc::bad_image, path.string() + ": malformed PGM header");
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255)
    throw GlyphError(GlyphErrc::bad_image, path.string() + ": unsupported PGM dimensions or maxval");
  if (pos >= buf.size() || !std::isspace(buf[pos]))
    throw GlyphError(GlyphErrc::bad_image, path.string() + ": malformed PGM header");
  ++pos;

  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (buf.size() - pos < n) throw GlyphError(GlyphErrc::bad_image, path.string() + ": truncated PGM data");

  GlyphImage img(static_cast<int>(width), static_cast<int>(height));
  auto px = img.pixels();
  for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<float>(buf[pos + i]) / static_cast<float>(maxval);
  return img;
}

}  // namespace ran::glyph
