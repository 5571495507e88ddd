#pragma once

// Live-byte accounting for tensor storage. Every Tensor buffer goes through
// TrackingAllocator, so the bench harness can report peak live tensor bytes
// without asking the OS.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>

namespace fdsm {

class MemoryStats {
 public:
  static MemoryStats& instance() {
    static MemoryStats stats;
    return stats;
  }

  void on_alloc(std::size_t bytes) noexcept {
    const auto now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    auto peak = peak_.load(std::memory_order_relaxed);
    while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
  }
  void on_free(std::size_t bytes) noexcept { live_.fetch_sub(bytes, std::memory_order_relaxed); }

  std::size_t live_bytes() const noexcept { return live_.load(std::memory_order_relaxed); }
  std::size_t peak_bytes() const noexcept { return peak_.load(std::memory_order_relaxed); }

  /// Restart peak tracking from the current live level.
  void reset_peak() noexcept { peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed); }

 private:
  MemoryStats() = default;
  std::atomic<std::size_t> live_{0};
  std::atomic<std::size_t> peak_{0};
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    MemoryStats::instance().on_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryStats::instance().on_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

/// Peak live bytes observed while a scope is active, relative to the live
/// level at scope entry.
class PeakMemoryScope {
 public:
  PeakMemoryScope() : baseline_(MemoryStats::instance().live_bytes()) { MemoryStats::instance().reset_peak(); }
  std::size_t peak_above_baseline() const {
    const auto peak = MemoryStats::instance().peak_bytes();
    return peak > baseline_ ? peak - baseline_ : 0;
  }

 private:
  std::size_t baseline_;
};

}  // namespace fdsm
