#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kitrec {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct InvalidInput : std::runtime_error {
  explicit InvalidInput(const std::string& msg) : std::runtime_error("InvalidInput: " + msg) {}
};
struct NoOverlap : std::runtime_error {
  explicit NoOverlap(const std::string& msg) : std::runtime_error("NoOverlap: " + msg) {}
};
struct FitError : std::runtime_error {
  explicit FitError(const std::string& msg) : std::runtime_error("FitError: " + msg) {}
};
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error("NumericalError: " + msg) {}
};
struct MissingPolicy : std::runtime_error {
  explicit MissingPolicy(const std::string& msg) : std::runtime_error("MissingPolicy: " + msg) {}
};
struct AlreadyRegistered : std::runtime_error {
  explicit AlreadyRegistered(const std::string& msg) : std::runtime_error("AlreadyRegistered: " + msg) {}
};
struct GraphError : std::runtime_error {
  explicit GraphError(const std::string& msg) : std::runtime_error("GraphError: " + msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("IoError: " + msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Deterministic seed substream: mix a base seed with one or more stream tags.
inline uint64_t derive_seed(uint64_t base, uint64_t tag) { return splitmix64(base ^ splitmix64(tag)); }
inline uint64_t derive_seed(uint64_t base, uint64_t tag1, uint64_t tag2) {
  return derive_seed(derive_seed(base, tag1), tag2);
}

// Random source with self-contained distributions so streams are
// reproducible independent of the standard library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller, cached pair.
  double normal() {
    if (has_cache_) {
      has_cache_ = false;
      return cache_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cache_ = r * std::sin(a);
    has_cache_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) throw InvalidInput("Rng::below(0)");
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  Rng derive(uint64_t tag) const { return Rng(derive_seed(state_hash(), tag)); }

 private:
  uint64_t state_hash() const {
    std::mt19937_64 copy = engine_;
    return copy();
  }
  std::mt19937_64 engine_;
  double cache_ = 0.0;
  bool has_cache_ = false;
};

inline double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf
  return m + std::log((v.array() - m).exp().sum());
}

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Digamma via recurrence + asymptotic expansion.
inline double digamma(double x) {
  if (!(x > 0.0)) throw NumericalError("digamma domain");
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)));
  return result;
}

inline double lgamma_multivariate(double x, int d) {
  double s = 0.25 * d * (d - 1) * std::log(M_PI);
  for (int i = 0; i < d; ++i) s += std::lgamma(x - 0.5 * i);
  return s;
}

inline double digamma_multivariate(double x, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += digamma(x - 0.5 * i);
  return s;
}

// Round-trip-exact double formatting for deterministic text records.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline bool nearly_equal(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace kitrec
