#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lara {

/// Raised when tensor/matrix dimensions do not agree.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised on invalid user-supplied values (strides, factors, indices, ...).
class ArgumentError : public std::invalid_argument {
 public:
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Raised on file-format and filesystem failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

#define LARA_CHECK_SHAPE(cond, ...)                                     \
  do {                                                                  \
    if (!(cond)) throw ::lara::ShapeError(::lara::detail::format_msg(__VA_ARGS__)); \
  } while (0)

#define LARA_CHECK_ARG(cond, ...)                                       \
  do {                                                                  \
    if (!(cond)) throw ::lara::ArgumentError(::lara::detail::format_msg(__VA_ARGS__)); \
  } while (0)

#define LARA_CHECK_IO(cond, ...)                                        \
  do {                                                                  \
    if (!(cond)) throw ::lara::IoError(::lara::detail::format_msg(__VA_ARGS__)); \
  } while (0)

/// Running high-water mark of the largest single buffer allocated by the
/// tensor engine. Tests reset it, run a forward pass and assert that no
/// intermediate ever reached T*T or P*T elements (the latent-bottleneck
/// memory contract).
struct AllocStats {
  static std::atomic<int64_t>& peak_single_alloc() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void reset() { peak_single_alloc().store(0); }
  static void record(int64_t numel) {
    auto& p = peak_single_alloc();
    int64_t cur = p.load();
    while (numel > cur && !p.compare_exchange_weak(cur, numel)) {
    }
  }
  static int64_t peak() { return peak_single_alloc().load(); }
};

/// Intra-op parallelism cap. Reads LARA_THREADS once; defaults to 1
/// (results are bitwise independent of the value because work is split
/// into fixed-size chunks that never share output elements).
inline int max_threads() {
  static int n = [] {
    const char* env = std::getenv("LARA_THREADS");
    if (env != nullptr) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& dims);

}  // namespace lara
