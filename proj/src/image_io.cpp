#include "lara/image_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>

namespace lara {

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32_be(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32_be(out, crc);
}

}  // namespace

std::vector<uint8_t> encode_png(const ImageU8& img) {
  LARA_CHECK_ARG(img.channels == 1 || img.channels == 3, "PNG codec supports 1 or 3 channels");
  LARA_CHECK_ARG(img.width > 0 && img.height > 0, "empty image");
  LARA_CHECK_ARG(img.data.size() ==
                     static_cast<size_t>(img.width) * img.height * img.channels,
                 "image buffer size mismatch");

  // raw scanlines with filter byte 0
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int r = 0; r < img.height; ++r) {
    raw.push_back(0);
    raw.insert(raw.end(), img.data.begin() + r * stride, img.data.begin() + (r + 1) * stride);
  }
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_size);
  LARA_CHECK_IO(compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()),
                          6) == Z_OK,
                "zlib compression failed");
  comp.resize(comp_size);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(img.width));
  put_u32_be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);           // color type
  ihdr.push_back(0);                                   // compression
  ihdr.push_back(0);                                   // filter
  ihdr.push_back(0);                                   // interlace
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", comp);
  append_chunk(out, "IEND", {});
  return out;
}

ImageU8 decode_png(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  LARA_CHECK_IO(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0, "not a PNG file");

  ImageU8 img;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 12 <= bytes.size() && !saw_iend) {
    const uint32_t len = get_u32_be(&bytes[pos]);
    LARA_CHECK_IO(pos + 12 + len <= bytes.size(), "truncated PNG chunk");
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* payload = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      LARA_CHECK_IO(len == 13, "bad IHDR length");
      img.width = static_cast<int>(get_u32_be(payload));
      img.height = static_cast<int>(get_u32_be(payload + 4));
      const uint8_t depth = payload[8], color = payload[9], interlace = payload[12];
      LARA_CHECK_IO(depth == 8, "unsupported PNG bit depth ", int(depth));
      LARA_CHECK_IO(color == 0 || color == 2, "unsupported PNG color type ", int(color));
      LARA_CHECK_IO(interlace == 0, "interlaced PNG unsupported");
      img.channels = color == 2 ? 3 : 1;
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  LARA_CHECK_IO(saw_ihdr && saw_iend && !idat.empty(), "incomplete PNG");

  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  const size_t raw_size = (stride + 1) * img.height;
  std::vector<uint8_t> raw(raw_size);
  uLongf got = static_cast<uLongf>(raw_size);
  LARA_CHECK_IO(uncompress(raw.data(), &got, idat.data(), static_cast<uLong>(idat.size())) == Z_OK &&
                    got == raw_size,
                "PNG inflate failed");

  img.data.resize(stride * img.height);
  const int bpp = img.channels;
  for (int r = 0; r < img.height; ++r) {
    const uint8_t filter = raw[r * (stride + 1)];
    const uint8_t* src = &raw[r * (stride + 1) + 1];
    uint8_t* dst = &img.data[r * stride];
    const uint8_t* up = r > 0 ? &img.data[(r - 1) * stride] : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int left = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
      const int above = up ? up[i] : 0;
      const int upleft = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: {
          const int p = left + above - upleft;
          const int pa = std::abs(p - left), pb = std::abs(p - above), pc = std::abs(p - upleft);
          v += (pa <= pb && pa <= pc) ? left : (pb <= pc ? above : upleft);
          break;
        }
        default: throw IoError("unknown PNG filter type " + std::to_string(filter));
      }
      dst[i] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

void write_png(const ImageU8& img, const std::string& path) {
  write_file_bytes(path, encode_png(img));
}

ImageU8 read_png(const std::string& path) { return decode_png(read_file_bytes(path)); }

void write_pgm(const ImageU8& img, const std::string& path) {
  LARA_CHECK_ARG(img.channels == 1, "PGM is single-channel");
  std::ofstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open for write: ", path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  LARA_CHECK_IO(f.good(), "write failed: ", path);
}

ImageU8 read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open: ", path);
  std::string magic;
  f >> magic;
  LARA_CHECK_IO(magic == "P5", "not a binary PGM: ", path);
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  LARA_CHECK_IO(w > 0 && h > 0 && maxval == 255, "unsupported PGM header in ", path);
  f.get();  // single whitespace after header
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.channels = 1;
  img.data.resize(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  LARA_CHECK_IO(f.gcount() == static_cast<std::streamsize>(img.data.size()), "truncated PGM: ",
                path);
  return img;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open: ", path);
  f.seekg(0, std::ios::end);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  LARA_CHECK_IO(f.gcount() == n, "short read: ", path);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  LARA_CHECK_IO(f.good(), "cannot open for write: ", path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  LARA_CHECK_IO(f.good(), "write failed: ", path);
}

}  // namespace lara
