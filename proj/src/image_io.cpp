#include "tpsalign/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tpsalign/common.hpp"

namespace tpsalign {

namespace {

uint8_t quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

// Reads the next header token, skipping whitespace and '#' comment lines.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (std::isspace(ch)) {
      ch = in.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = in.get();
  }
  return tok;
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 2) throw ConfigError("write_pgm expects an H x W tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const int64_t h = image.shape(0);
  const int64_t w = image.shape(1);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w));
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) row[static_cast<size_t>(c)] = quantize(image.at(r, c));
    out.write(reinterpret_cast<const char*>(row.data()), w);
  }
  if (!out) throw IoError("short write: " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  if (next_token(in) != "P5") throw ConfigError("not a binary PGM: " + path);
  const std::string ws = next_token(in);
  const std::string hs = next_token(in);
  const std::string ms = next_token(in);
  int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(ws);
    h = std::stoll(hs);
    maxval = std::stoll(ms);
  } catch (const std::exception&) {
    throw ConfigError("malformed PGM header: " + path);
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    throw ConfigError("unsupported PGM dimensions or maxval: " + path);
  // exactly one whitespace byte separates the header from the raster
  std::vector<uint8_t> bytes(static_cast<size_t>(w * h));
  in.read(reinterpret_cast<char*>(bytes.data()), w * h);
  if (in.gcount() != w * h) throw ConfigError("truncated PGM raster: " + path);
  Tensor img({h, w});
  for (int64_t i = 0; i < h * w; ++i) img[i] = bytes[static_cast<size_t>(i)] / 255.0;
  return img;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape(2) != 3)
    throw ConfigError("write_ppm expects an H x W x 3 tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const int64_t h = image.shape(0);
  const int64_t w = image.shape(1);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(w * 3));
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c)
      for (int64_t k = 0; k < 3; ++k)
        row[static_cast<size_t>(c * 3 + k)] = quantize(image.at(r, c, k));
    out.write(reinterpret_cast<const char*>(row.data()), w * 3);
  }
  if (!out) throw IoError("short write: " + path);
}

}  // namespace tpsalign
