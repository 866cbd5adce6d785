/*
 * core.hpp
 *
 * Shared vocabulary for the cased library: error types, 3D index and
 * coordinate types, a dense 3D array, a portable RNG, and a warning sink.
 */
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cased {

/// Input violates a documented precondition (exit code 1 at the CLI).
class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Reading or writing an artifact failed (exit code 2 at the CLI).
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

// ---------------------------------------------------------------------------
// Warnings

using WarningHandler = std::function<void(std::string_view)>;

namespace detail {
inline std::mutex& warning_mutex() {
  static std::mutex m;
  return m;
}
inline WarningHandler& warning_handler() {
  static WarningHandler h = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return h;
}
}  // namespace detail

/// Replaces the process-wide warning sink and returns the previous one.
inline WarningHandler set_warning_handler(WarningHandler h) {
  std::lock_guard lock(detail::warning_mutex());
  std::swap(detail::warning_handler(), h);
  return h;
}

inline void warn(std::string_view msg) {
  std::lock_guard lock(detail::warning_mutex());
  if (detail::warning_handler()) detail::warning_handler()(msg);
}

/// Collects warnings for the lifetime of the object (tests, quiet CLI runs).
class WarningCapture {
public:
  WarningCapture()
      : previous_(set_warning_handler([this](std::string_view m) { messages_.emplace_back(m); })) {}
  ~WarningCapture() { set_warning_handler(std::move(previous_)); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }

private:
  std::vector<std::string> messages_;
  WarningHandler previous_;
};

// ---------------------------------------------------------------------------
// Geometry

struct Vec3 {
  double x = 0, y = 0, z = 0;

  double& operator[](int a) { return a == 0 ? x : (a == 1 ? y : z); }
  double operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double distance(Vec3 a, Vec3 b) {
  const Vec3 d = a - b;
  return std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
}

struct Index3 {
  int64_t x = 0, y = 0, z = 0;

  int64_t& operator[](int a) { return a == 0 ? x : (a == 1 ? y : z); }
  int64_t operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
  friend Index3 operator+(Index3 a, Index3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Index3 operator-(Index3 a, Index3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend auto operator<=>(const Index3&, const Index3&) = default;
};

/// Voxel counts per axis. Linear indices are C-order with x fastest.
struct Dims {
  int64_t nx = 0, ny = 0, nz = 0;

  static Dims cube(int64_t n) { return {n, n, n}; }

  int64_t operator[](int a) const { return a == 0 ? nx : (a == 1 ? ny : nz); }
  int64_t& operator[](int a) { return a == 0 ? nx : (a == 1 ? ny : nz); }
  size_t size() const { return static_cast<size_t>(nx * ny * nz); }
  bool valid() const { return nx >= 1 && ny >= 1 && nz >= 1; }
  bool contains(Index3 p) const {
    return p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x < nx && p.y < ny && p.z < nz;
  }
  size_t linear(int64_t x, int64_t y, int64_t z) const {
    return static_cast<size_t>((z * ny + y) * nx + x);
  }
  size_t linear(Index3 p) const { return linear(p.x, p.y, p.z); }
  Index3 unravel(size_t i) const {
    const auto li = static_cast<int64_t>(i);
    return {li % nx, (li / nx) % ny, li / (nx * ny)};
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

/// Dense 3D array, x fastest.
template <typename T>
class Array3 {
public:
  Array3() = default;
  explicit Array3(Dims d, T fill = T{}) : dims_(d), data_(d.size(), fill) {}
  Array3(Dims d, std::vector<T> data) : dims_(d), data_(std::move(data)) {
    require(data_.size() == dims_.size(), "Array3: buffer length does not match dims");
  }

  const Dims& dims() const { return dims_; }
  size_t size() const { return data_.size(); }

  T& operator()(int64_t x, int64_t y, int64_t z) { return data_[dims_.linear(x, y, z)]; }
  const T& operator()(int64_t x, int64_t y, int64_t z) const { return data_[dims_.linear(x, y, z)]; }
  T& operator[](Index3 p) { return data_[dims_.linear(p)]; }
  const T& operator[](Index3 p) const { return data_[dims_.linear(p)]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  friend bool operator==(const Array3&, const Array3&) = default;

private:
  Dims dims_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Random numbers
//
// std::mt19937_64 output is fixed by the standard, but the std
// distributions are not, so every draw goes through the helpers below.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for the i-th independent substream of `seed`.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

class Rng {
public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached second value, so state is just the engine).
  double normal() {
    double u1 = 0;
    while (u1 <= 0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw ValidationError("Rng: malformed engine state");
  }

private:
  std::mt19937_64 engine_;
};

/// FNV-1a, used for checkpoint layout hashes.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cased
