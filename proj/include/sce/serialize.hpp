// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sce/encoder.hpp"

// On-disk model layout, one directory per model:
//
//   config.json    EncoderConfig fields
//   weights.bin    every tensor back to back, row-major, little-endian
//   manifest.json  {"byte_order": "little", "tensors": [{name, dtype, shape,
//                  offset, nbytes}, ...]}
//   vocab.txt      optional, one term per line after the special tokens
namespace sce::io {

struct TensorEntry {
  std::string name;
  Precision dtype = Precision::f64;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct Manifest {
  std::string byte_order = "little";
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const;
};

std::string config_to_json(const EncoderConfig& config);
EncoderConfig config_from_json(const std::string& text);

std::string manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const std::string& text);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes config, blob and manifest. Tensors are stored in the model's own
/// element type.
template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& dir, const Vocabulary* vocab = nullptr);

/// Reads a model directory, converting stored tensors to T if needed.
template <typename T>
Model<T> load_model(const std::filesystem::path& dir);

std::optional<Vocabulary> load_vocabulary(const std::filesystem::path& dir);

}  // namespace sce::io
