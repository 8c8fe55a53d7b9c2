#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uqmd {

/// Error taxonomy. Everything thrown by the library derives from Error so
/// the C API boundary can map exceptions onto status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied values: out-of-range controls, malformed requests.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatches between containers that must agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File-format violations while reading datasets or checkpoints.
class ParseError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Linear algebra or optimization breakdown (non-SPD matrices, divergence).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Deformation states the analytic stress path cannot handle.
class UnsupportedKinematicsError : public Error {
 public:
  using Error::Error;
};

/// Pipeline stage failure wrapping whatever went wrong inside the stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Stage seeds are derived from the root seed by mixing in the stage tag,
/// so adding a stage never perturbs the draws of existing ones.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  return splitmix64(root ^ fnv1a64(tag));
}

/// Deterministic RNG. mt19937_64 output is pinned by the standard and the
/// uniform/normal transforms below avoid the implementation-defined
/// std::*_distribution, so streams are reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the spare draw is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // 1 - u1 lies in (0, 1], keeping the log argument positive.
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Piecewise-linear interpolation of (xs, ys) at x. xs must be strictly
/// increasing and bracket x up to a small tolerance; anything further out
/// is an extrapolation error.
double lerp_at(std::span<const double> xs, std::span<const double> ys, double x);

/// Type-7 (linear between order statistics) quantile of unsorted values,
/// q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Run fn(i) for i in [0, n). Plain loop for threads <= 1; otherwise a
/// strided split across workers. Each index must write only its own slots,
/// which keeps results identical for any thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace uqmd
