// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <new>
#include <string_view>

// Logical allocation accounting. Buffers that matter for the efficiency
// analysis hold a Ticket for their byte size; the ledger keeps current and
// peak totals per category and overall.
namespace sce::mem {

enum class Category : std::uint8_t { weights = 0, activations = 1, attention = 2 };
inline constexpr std::size_t kCategoryCount = 3;

std::string_view to_string(Category c);

struct Snapshot {
  std::array<std::int64_t, kCategoryCount> current{};
  std::array<std::int64_t, kCategoryCount> peak{};
  std::int64_t total_current = 0;
  std::int64_t total_peak = 0;

  std::int64_t peak_of(Category c) const { return peak[static_cast<std::size_t>(c)]; }
  std::int64_t current_of(Category c) const { return current[static_cast<std::size_t>(c)]; }
};

// Thrown when a charge would push the total above the configured limit.
class OutOfMemory : public std::bad_alloc {
 public:
  const char* what() const noexcept override { return "tracked allocation limit exceeded"; }
};

Snapshot snapshot();

// Resets peaks to the current values.
void reset_peaks();

// 0 disables the limit.
void set_limit(std::int64_t bytes);
std::int64_t limit();

void charge(Category c, std::int64_t bytes);
void release(Category c, std::int64_t bytes) noexcept;

// RAII charge. Copies charge again, moves transfer ownership.
class Ticket {
 public:
  Ticket() = default;
  Ticket(Category c, std::int64_t bytes) : category_(c), bytes_(bytes) { charge(c, bytes); }
  ~Ticket() { reset(); }

  Ticket(const Ticket& other) : category_(other.category_), bytes_(0) {
    charge(other.category_, other.bytes_);
    bytes_ = other.bytes_;
  }
  Ticket& operator=(const Ticket& other) {
    if (this != &other) {
      charge(other.category_, other.bytes_);
      reset();
      category_ = other.category_;
      bytes_ = other.bytes_;
    }
    return *this;
  }
  Ticket(Ticket&& other) noexcept : category_(other.category_), bytes_(other.bytes_) { other.bytes_ = 0; }
  Ticket& operator=(Ticket&& other) noexcept {
    if (this != &other) {
      reset();
      category_ = other.category_;
      bytes_ = other.bytes_;
      other.bytes_ = 0;
    }
    return *this;
  }

  void reset() noexcept {
    if (bytes_ != 0) release(category_, bytes_);
    bytes_ = 0;
  }

  std::int64_t bytes() const { return bytes_; }

 private:
  Category category_ = Category::activations;
  std::int64_t bytes_ = 0;
};

template <typename T>
Ticket ticket_for(Category c, std::int64_t elements) {
  return Ticket(c, elements * static_cast<std::int64_t>(sizeof(T)));
}

}  // namespace sce::mem
