// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

// Multiply-add instrumentation. The naive kernels add one count per executed
// multiply-add; dense products issued through Eigen add rows*cols*inner at the
// call site. Counting is off unless a Scope is active.
namespace sce::flops {

bool enabled();
void add(std::uint64_t n);
std::uint64_t total();

class Scope {
 public:
  Scope();
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  std::uint64_t count() const;

 private:
  std::uint64_t start_;
  bool was_enabled_;
};

inline void add_product(std::int64_t rows, std::int64_t cols, std::int64_t inner) {
  if (enabled()) add(static_cast<std::uint64_t>(rows) * cols * inner);
}

}  // namespace sce::flops
