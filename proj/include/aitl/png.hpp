#pragma once

#include <zlib.h>

#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "aitl/fsio.hpp"
#include "aitl/tensor.hpp"

namespace aitl {
namespace png {

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

inline uint32_t get_u32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void put_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_u32(out, static_cast<uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

/// Encode an HxWx3 [0,1] image as an 8-bit RGB PNG.
inline std::string encode(const Tensor& img) {
  const int h = img.shape[0], w = img.shape[1], C = img.shape[2];
  if (C != 3) throw std::invalid_argument("png::encode: expected 3 channels");
  std::string raw;
  raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * 3));
  for (int y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter 0
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(y, x, c), 0.0f, 1.0f);
        raw.push_back(static_cast<char>(static_cast<int>(std::lround(v * 255.0f))));
      }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png::encode: deflate failed");
  compressed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_u32(ihdr, static_cast<uint32_t>(w));
  detail::put_u32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", compressed);
  detail::put_chunk(out, "IEND", "");
  return out;
}

inline void write_file(const Tensor& img, const std::string& path) { atomic_write_file(path, encode(img)); }

/// Decode an 8-bit gray / RGB / RGBA PNG (no interlace) into HxWx3 [0,1].
inline Tensor decode(const std::string& bytes, const std::string& origin = "<png>") {
  auto fail = [&](const std::string& why) -> std::runtime_error {
    return std::runtime_error("png " + origin + ": " + why);
  };
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || std::memcmp(p, "\x89PNG\r\n\x1a\n", 8) != 0) throw fail("not a PNG file");

  size_t off = 8;
  int w = 0, h = 0, depth = 0, color = 0;
  std::string idat;
  while (off + 8 <= bytes.size()) {
    uint32_t len = detail::get_u32(p + off);
    if (off + 12 + len > bytes.size()) throw fail("truncated chunk");
    std::string type(bytes.substr(off + 4, 4));
    const unsigned char* data = p + off + 8;
    if (type == "IHDR") {
      w = static_cast<int>(detail::get_u32(data));
      h = static_cast<int>(detail::get_u32(data + 4));
      depth = data[8];
      color = data[9];
      if (data[12] != 0) throw fail("interlaced PNG not supported");
      if (depth != 8) throw fail("only 8-bit PNGs supported");
      if (color != 0 && color != 2 && color != 6) throw fail("unsupported color type");
    } else if (type == "IDAT") {
      idat.append(bytes, off + 8, len);
    } else if (type == "IEND") {
      break;
    }
    off += 12 + len;
  }
  if (w <= 0 || h <= 0 || idat.empty()) throw fail("missing IHDR or IDAT");

  const int nch = color == 0 ? 1 : (color == 2 ? 3 : 4);
  const size_t stride = static_cast<size_t>(w) * nch;
  std::string raw(static_cast<size_t>(h) * (stride + 1), '\0');
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len, reinterpret_cast<const Bytef*>(idat.data()),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw fail("corrupt compressed image data");

  // undo per-row filters in place
  std::vector<unsigned char> prev(stride, 0), cur(stride, 0);
  Tensor img({h, w, 3});
  for (int y = 0; y < h; ++y) {
    const unsigned char* row = reinterpret_cast<const unsigned char*>(raw.data()) + static_cast<size_t>(y) * (stride + 1);
    int filter = row[0];
    for (size_t i = 0; i < stride; ++i) {
      int x = row[1 + i];
      int a = i >= static_cast<size_t>(nch) ? cur[i - nch] : 0;
      int b = prev[i];
      int c = i >= static_cast<size_t>(nch) ? prev[i - nch] : 0;
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += detail::paeth(a, b, c); break;
        default: throw fail("unknown filter type");
      }
      cur[i] = static_cast<unsigned char>(x & 0xff);
    }
    for (int xq = 0; xq < w; ++xq)
      for (int ch = 0; ch < 3; ++ch) {
        unsigned char v = nch == 1 ? cur[static_cast<size_t>(xq)] : cur[static_cast<size_t>(xq) * nch + ch];
        img.at(y, xq, ch) = static_cast<float>(v) / 255.0f;
      }
    std::swap(prev, cur);
  }
  return img;
}

inline Tensor read_file(const std::string& path) { return decode(aitl::read_file(path), path); }

}  // namespace png
}  // namespace aitl
