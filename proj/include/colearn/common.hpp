#pragma once

// Shared plumbing: error types, a fully specified PRNG, and the parallel-for
// wrapper every kernel goes through. Parallelism is only ever across
// independent output elements; within one element accumulation order is fixed,
// so results do not depend on the thread count.

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and assume a little-endian host");

namespace colearn {

// Exit-code taxonomy of the CLI: usage=1, data/validation=2, numeric=3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class... Args>
std::string strcat_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <class... Args>
[[noreturn]] void fail_data(Args&&... args) {
  throw DataError(strcat_msg(std::forward<Args>(args)...));
}

template <class... Args>
[[noreturn]] void fail_numeric(Args&&... args) {
  throw NumericError(strcat_msg(std::forward<Args>(args)...));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

// ---------------------------------------------------------------------------
// PRNG. splitmix64 core with explicit stream derivation; distributions are
// spelled out here so generated datasets are identical across standard
// libraries, not just across runs.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
  }

  // Box-Muller; the sine branch is discarded to keep the stream position
  // a simple function of the call count.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Independent child stream for (subject, epoch, ...) style keys.
  Rng derive(uint64_t stream) const {
    uint64_t s = state_;
    uint64_t a = splitmix64(s);
    uint64_t mix = a ^ (stream + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return Rng(mix);
  }

 private:
  uint64_t state_;
};

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
}

// FNV-1a, used for checkpoint fingerprints.
inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Threading.

inline void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// f(i) must write only state owned by index i.
template <class F>
void parallel_for(int64_t n, F&& f) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

}  // namespace colearn
