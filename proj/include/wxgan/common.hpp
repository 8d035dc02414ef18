#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, seed derivation,
// byte-order helpers, and a small worker pool whose results are independent
// of the thread count (each output element is owned by exactly one task).

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace wxgan {

// ----------------------------------------------------------------------------
// errors: CLI maps ConfigError->2, DataError->3, NumericError->4

struct Error : std::runtime_error {
  explicit Error(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config: " + m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data: " + m) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape: " + m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric: " + m) {}
};

// ----------------------------------------------------------------------------
// seed derivation / stable hashing

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  return splitmix64(master ^ splitmix64(stream));
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// ----------------------------------------------------------------------------
// Rng: mt19937_64 engine with explicit distributions so every draw is a pure
// function of engine state (no hidden caches; state round-trips as text).

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0,1) with 53 random bits
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without the cached second value; two draws per sample
  double normal() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // unbiased [0,n) by rejection
  int uniform_int(int n) {
    if (n <= 0) throw Error("uniform_int: n must be positive");
    uint64_t un = uint64_t(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v;
    do { v = eng_(); } while (v >= limit);
    return int(v % un);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw Error("Rng: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

// Fisher-Yates; noted here because std::shuffle's draws are not pinned by the
// standard and this permutation must be reproducible bit-for-bit.
template <class T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = size_t(rng.uniform_int(int(i)));
    std::swap(v[i - 1], v[j]);
  }
}

// ----------------------------------------------------------------------------
// little-endian scalar IO (storage format is explicitly little-endian)

static_assert(sizeof(float) == 4);

inline void store_f32_le(unsigned char* p, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  p[0] = u & 0xff; p[1] = (u >> 8) & 0xff; p[2] = (u >> 16) & 0xff; p[3] = (u >> 24) & 0xff;
}
inline float load_f32_le(const unsigned char* p) {
  uint32_t u = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

// ----------------------------------------------------------------------------
// ThreadPool: persistent workers; parallel_for partitions [0,n) into chunks.
// Every index is computed by exactly one task with a fixed serial inner order,
// so results do not depend on the worker count (WXGAN_THREADS, default 1x
// hardware). Reductions stay out of the pool.

class ThreadPool {
 public:
  static ThreadPool& instance();

  int threads() const { return int(workers_.size()) + 1; }

  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

  ~ThreadPool();

 private:
  explicit ThreadPool(int workers);

  struct Task {
    const std::function<void(int64_t, int64_t)>* body = nullptr;
    int64_t chunk = 0;
    int64_t n = 0;
  };

  void worker_loop();

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  Task task_;
  std::atomic<int64_t> next_{0};
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace wxgan
