#pragma once

#include <zlib.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cldyn/tensor.hpp"

namespace cldyn {

// Grayscale image files. Two formats: binary PGM (P5) and 8-bit grayscale
// PNG (color type 0, no interlace). In-memory images are 1 x H x W tensors
// in [0,1]; files quantize to 8 bits.

namespace detail {

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

inline std::uint8_t quantize(double v) {
  double q = std::round(std::min(std::max(v, 0.0), 1.0) * 255.0);
  return static_cast<std::uint8_t>(q);
}

inline Tensor gray_bytes_to_tensor(const std::vector<std::uint8_t>& px, long h, long w,
                                   double maxval) {
  std::vector<double> data(px.size());
  for (size_t i = 0; i < px.size(); ++i)
    data[i] = std::min(std::max(static_cast<double>(px[i]) / maxval, 0.0), 1.0);
  return Tensor::from_data(Shape{1, h, w}, std::move(data));
}

inline void push_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xFF));
  s.push_back(static_cast<char>((v >> 16) & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
  s.push_back(static_cast<char>(v & 0xFF));
}

inline std::uint32_t read_be32(const std::string& s, size_t pos) {
  if (pos + 4 > s.size()) throw IoError("truncated PNG");
  return (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[pos])) << 24) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[pos + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[pos + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[pos + 3]));
}

}  // namespace detail

// --- PGM (binary P5) -------------------------------------------------------

inline Tensor load_pgm(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw IoError("truncated PGM header in " + path);
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P5") throw IoError("unsupported format (expected binary P5): " + path);
  const long w = std::stol(next_token());
  const long h = std::stol(next_token());
  const long maxval = std::stol(next_token());
  if (w <= 0 || h <= 0) throw IoError("bad PGM dimensions in " + path);
  if (maxval <= 0 || maxval > 255) throw IoError("unsupported PGM maxval in " + path);
  ++pos;  // single whitespace after maxval
  if (pos + static_cast<size_t>(w * h) > bytes.size()) throw IoError("truncated PGM pixel data in " + path);
  std::vector<std::uint8_t> px(static_cast<size_t>(w * h));
  std::memcpy(px.data(), bytes.data() + pos, px.size());
  return detail::gray_bytes_to_tensor(px, h, w, static_cast<double>(maxval));
}

inline void save_pgm(const Tensor& img, const std::string& path) {
  if (img.shape().rank != 3 || img.shape()[0] != 1)
    throw ShapeError("save_pgm expects 1 x H x W, got " + img.shape().str());
  const long h = img.shape()[1], w = img.shape()[2];
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<size_t>(h * w));
  for (double v : img.data()) out.push_back(static_cast<char>(detail::quantize(v)));
  detail::write_file_bytes(path, out);
}

// --- PNG (8-bit gray) ------------------------------------------------------

inline Tensor load_png(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw IoError("not a PNG file: " + path);
  size_t pos = 8;
  long w = 0, h = 0;
  int bit_depth = 0, color_type = -1, interlace = 0;
  std::string idat;
  bool seen_iend = false;
  while (pos + 8 <= bytes.size() && !seen_iend) {
    const std::uint32_t len = detail::read_be32(bytes, pos);
    const std::string type = bytes.substr(pos + 4, 4);
    if (pos + 12 + len > bytes.size()) throw IoError("truncated PNG chunk in " + path);
    const char* data = bytes.data() + pos + 8;
    if (type == "IHDR") {
      if (len != 13) throw IoError("bad IHDR in " + path);
      w = static_cast<long>(detail::read_be32(bytes, pos + 8));
      h = static_cast<long>(detail::read_be32(bytes, pos + 12));
      bit_depth = static_cast<std::uint8_t>(data[8]);
      color_type = static_cast<std::uint8_t>(data[9]);
      interlace = static_cast<std::uint8_t>(data[12]);
    } else if (type == "IDAT") {
      idat.append(data, len);
    } else if (type == "IEND") {
      seen_iend = true;
    }
    pos += 12 + len;
  }
  if (!seen_iend) throw IoError("truncated PNG (no IEND) in " + path);
  if (w <= 0 || h <= 0) throw IoError("bad PNG dimensions in " + path);
  if (bit_depth != 8 || color_type != 0 || interlace != 0)
    throw IoError("unsupported PNG variant (need 8-bit gray, no interlace): " + path);

  const size_t raw_size = static_cast<size_t>(h) * (static_cast<size_t>(w) + 1);
  std::vector<std::uint8_t> raw(raw_size);
  uLongf out_len = static_cast<uLongf>(raw_size);
  if (uncompress(raw.data(), &out_len, reinterpret_cast<const Bytef*>(idat.data()),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      out_len != raw_size)
    throw IoError("PNG inflate failed in " + path);

  std::vector<std::uint8_t> px(static_cast<size_t>(h * w));
  auto paeth = [](int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
  };
  for (long y = 0; y < h; ++y) {
    const std::uint8_t filter = raw[static_cast<size_t>(y) * (static_cast<size_t>(w) + 1)];
    const std::uint8_t* row = raw.data() + static_cast<size_t>(y) * (static_cast<size_t>(w) + 1) + 1;
    std::uint8_t* out = px.data() + static_cast<size_t>(y * w);
    const std::uint8_t* up = y > 0 ? px.data() + static_cast<size_t>((y - 1) * w) : nullptr;
    for (long x = 0; x < w; ++x) {
      const int left = x > 0 ? out[x - 1] : 0;
      const int above = up ? up[x] : 0;
      const int upleft = (up && x > 0) ? up[x - 1] : 0;
      int v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: v += paeth(left, above, upleft); break;
        default: throw IoError("bad PNG filter type in " + path);
      }
      out[x] = static_cast<std::uint8_t>(v & 0xFF);
    }
  }
  return detail::gray_bytes_to_tensor(px, h, w, 255.0);
}

inline void save_png(const Tensor& img, const std::string& path) {
  if (img.shape().rank != 3 || img.shape()[0] != 1)
    throw ShapeError("save_png expects 1 x H x W, got " + img.shape().str());
  const long h = img.shape()[1], w = img.shape()[2];
  std::vector<std::uint8_t> raw(static_cast<size_t>(h) * (static_cast<size_t>(w) + 1));
  for (long y = 0; y < h; ++y) {
    raw[static_cast<size_t>(y) * (static_cast<size_t>(w) + 1)] = 0;  // filter: None
    for (long x = 0; x < w; ++x)
      raw[static_cast<size_t>(y) * (static_cast<size_t>(w) + 1) + 1 + static_cast<size_t>(x)] =
          detail::quantize(img.data()[static_cast<size_t>(y * w + x)]);
  }
  uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_bound);
  if (compress2(comp.data(), &comp_bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("PNG deflate failed for " + path);
  comp.resize(comp_bound);

  std::string out;
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  out.append(reinterpret_cast<const char*>(sig), 8);
  auto chunk = [&out](const char* type, const std::string& data) {
    detail::push_be32(out, static_cast<std::uint32_t>(data.size()));
    std::string td(type, 4);
    td += data;
    out += td;
    detail::push_be32(out, static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(td.data()), static_cast<uInt>(td.size()))));
  };
  std::string ihdr;
  detail::push_be32(ihdr, static_cast<std::uint32_t>(w));
  detail::push_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // gray
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", std::string(reinterpret_cast<const char*>(comp.data()), comp.size()));
  chunk("IEND", "");
  detail::write_file_bytes(path, out);
}

// --- format dispatch -------------------------------------------------------

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline Tensor load_image(const std::string& path) {
  if (has_suffix(path, ".pgm")) return load_pgm(path);
  if (has_suffix(path, ".png")) return load_png(path);
  throw IoError("unsupported image format (use .pgm or .png): " + path);
}

inline void save_image(const Tensor& img, const std::string& path) {
  if (has_suffix(path, ".pgm")) return save_pgm(img, path);
  if (has_suffix(path, ".png")) return save_png(img, path);
  throw IoError("unsupported image format (use .pgm or .png): " + path);
}

}  // namespace cldyn
