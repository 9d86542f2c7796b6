#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mulmon {

// Error categories map to distinct CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
template <class... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

#define MULMON_CHECK(cond, ...)                                          \
  do {                                                                   \
    if (!(cond))                                                         \
      throw ::mulmon::ConfigError(                                       \
          ::mulmon::detail::format_msg("check failed: " #cond " — ",     \
                                       ##__VA_ARGS__));                  \
  } while (0)

#define MULMON_CHECK_DATA(cond, ...)                                     \
  do {                                                                   \
    if (!(cond))                                                         \
      throw ::mulmon::DataError(                                         \
          ::mulmon::detail::format_msg(__VA_ARGS__));                    \
  } while (0)

// Worker count for scene-level parallelism. MULMON_THREADS overrides;
// keeping it fixed also pins the gradient reduction order (bitwise
// reproducible runs).
inline int worker_count() {
  if (const char* env = std::getenv("MULMON_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Static partition: worker w handles items w, w+nw, w+2nw, ...
// Results must be combined by the caller in a fixed order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         int workers = 0) {
  if (workers <= 0) workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error = nullptr;
  std::mutex err_mu;
  int nw = std::min<std::size_t>(workers, n);
  pool.reserve(nw);
  for (int w = 0; w < nw; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = w; i < n; i += nw) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mulmon
