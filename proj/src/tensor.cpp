#include "lara/tensor.hpp"

#include <cstdio>
#include <cstring>

#include "lara/checkpoint.hpp"

namespace lara {

std::string shape_to_string(const std::vector<int64_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  LARA_CHECK_IO(std::fwrite(p, 1, n, f) == n, "short write to ", path);
}

void read_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
  LARA_CHECK_IO(std::fread(p, 1, n, f) == n, "truncated file: ", path);
}

template <typename T>
void write_le(std::FILE* f, T v, const std::string& path) {
  // Host is little-endian on all supported targets.
  write_bytes(f, &v, sizeof(T), path);
}

template <typename T>
T read_le(std::FILE* f, const std::string& path) {
  T v;
  read_bytes(f, &v, sizeof(T), path);
  return v;
}

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  LARA_CHECK_IO(f != nullptr, "cannot open for write: ", path);
  write_bytes(f.get(), "LARA", 4, path);
  write_le<uint32_t>(f.get(), kCheckpointVersion, path);
  write_le<uint32_t>(f.get(), static_cast<uint32_t>(tensors.size()), path);
  for (const auto& [name, t] : tensors) {
    LARA_CHECK_IO(name.size() <= 0xffff, "tensor name too long: ", name);
    write_le<uint16_t>(f.get(), static_cast<uint16_t>(name.size()), path);
    write_bytes(f.get(), name.data(), name.size(), path);
    write_le<uint8_t>(f.get(), static_cast<uint8_t>(t.rank()), path);
    for (int64_t d : t.dims()) write_le<uint64_t>(f.get(), static_cast<uint64_t>(d), path);
    write_bytes(f.get(), t.data().data(), sizeof(float) * static_cast<size_t>(t.numel()), path);
  }
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  LARA_CHECK_IO(f != nullptr, "cannot open: ", path);
  char magic[4];
  read_bytes(f.get(), magic, 4, path);
  LARA_CHECK_IO(std::memcmp(magic, "LARA", 4) == 0, "bad magic in ", path);
  const uint32_t version = read_le<uint32_t>(f.get(), path);
  LARA_CHECK_IO(version == kCheckpointVersion, "unsupported checkpoint version ", version, " in ",
                path);
  const uint32_t count = read_le<uint32_t>(f.get(), path);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = read_le<uint16_t>(f.get(), path);
    std::string name(name_len, '\0');
    read_bytes(f.get(), name.data(), name_len, path);
    const uint8_t rank = read_le<uint8_t>(f.get(), path);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = static_cast<int64_t>(read_le<uint64_t>(f.get(), path));
    Tensor t = Tensor::zeros(dims);
    read_bytes(f.get(), t.data().data(), sizeof(float) * static_cast<size_t>(t.numel()), path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace lara
