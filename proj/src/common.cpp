#include "uqmd/common.hpp"

#include <algorithm>
#include <mutex>
#include <thread>

namespace uqmd {

double lerp_at(std::span<const double> xs, std::span<const double> ys, double x) {
  if (xs.size() != ys.size()) throw DimensionError("lerp_at: xs/ys size mismatch");
  if (xs.size() < 2) throw InvalidInputError("lerp_at: need at least two knots");
  const double span = xs.back() - xs.front();
  const double tol = 1e-9 * std::max(1.0, std::abs(span));
  if (x < xs.front() - tol || x > xs.back() + tol)
    throw InvalidInputError("lerp_at: query outside grid range (extrapolation)");
  x = std::clamp(x, xs.front(), xs.back());
  auto it = std::upper_bound(xs.begin(), xs.end(), x);
  std::size_t hi = std::min<std::size_t>(std::distance(xs.begin(), it), xs.size() - 1);
  if (hi == 0) hi = 1;
  std::size_t lo = hi - 1;
  double dx = xs[hi] - xs[lo];
  if (dx <= 0.0) throw InvalidInputError("lerp_at: grid not strictly increasing");
  double t = (x - xs[lo]) / dx;
  return ys[lo] + t * (ys[hi] - ys[lo]);
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw InvalidInputError("quantile: empty sample");
  if (q < 0.0 || q > 1.0) throw InvalidInputError("quantile: q outside [0,1]");
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  double h = q * static_cast<double>(v.size() - 1);
  std::size_t lo = static_cast<std::size_t>(h);
  if (lo >= v.size() - 1) return v.back();
  double t = h - static_cast<double>(lo);
  return v[lo] + t * (v[lo + 1] - v[lo]);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace uqmd
