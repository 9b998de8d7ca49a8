// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <atomic>
#include <charconv>
#include <mutex>

#include "sce/flops.hpp"
#include "sce/memory.hpp"
#include "sce/types.hpp"

namespace sce {

Window Window::parse(std::string_view text) {
  if (text == "inf" || text == "infinite" || text == "∞") return Window::infinite();
  std::size_t w = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), w);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("invalid window size: " + std::string(text));
  }
  return Window::of(w);
}

Precision parse_precision(std::string_view text) {
  if (text == "f32" || text == "float") return Precision::f32;
  if (text == "f64" || text == "double") return Precision::f64;
  throw std::invalid_argument("invalid precision: " + std::string(text));
}

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

namespace mem {
namespace {

struct Ledger {
  std::mutex mutex;
  Snapshot state;
  std::int64_t limit = 0;
};

Ledger& ledger() {
  static Ledger l;
  return l;
}

}  // namespace

std::string_view to_string(Category c) {
  switch (c) {
    case Category::weights: return "weights";
    case Category::activations: return "activations";
    case Category::attention: return "attention";
  }
  return "?";
}

Snapshot snapshot() {
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  return l.state;
}

void reset_peaks() {
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  l.state.peak = l.state.current;
  l.state.total_peak = l.state.total_current;
}

void set_limit(std::int64_t bytes) {
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  l.limit = bytes;
}

std::int64_t limit() {
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  return l.limit;
}

void charge(Category c, std::int64_t bytes) {
  if (bytes == 0) return;
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  const auto k = static_cast<std::size_t>(c);
  if (l.limit > 0 && l.state.total_current + bytes > l.limit) throw OutOfMemory();
  l.state.current[k] += bytes;
  l.state.total_current += bytes;
  l.state.peak[k] = std::max(l.state.peak[k], l.state.current[k]);
  l.state.total_peak = std::max(l.state.total_peak, l.state.total_current);
}

void release(Category c, std::int64_t bytes) noexcept {
  if (bytes == 0) return;
  auto& l = ledger();
  std::lock_guard lock(l.mutex);
  l.state.current[static_cast<std::size_t>(c)] -= bytes;
  l.state.total_current -= bytes;
}

}  // namespace mem

namespace flops {
namespace {
std::atomic<std::uint64_t> g_total{0};
std::atomic<int> g_depth{0};
}  // namespace

bool enabled() { return g_depth.load(std::memory_order_relaxed) > 0; }
void add(std::uint64_t n) { g_total.fetch_add(n, std::memory_order_relaxed); }
std::uint64_t total() { return g_total.load(); }

Scope::Scope() : start_(g_total.load()), was_enabled_(enabled()) { g_depth.fetch_add(1); }
Scope::~Scope() { g_depth.fetch_sub(1); }
std::uint64_t Scope::count() const { return g_total.load() - start_; }

}  // namespace flops
}  // namespace sce
