// Copyright 2026 The sparse-ce Authors
// SPDX-License-Identifier: Apache-2.0

#include "sce/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sce::io {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

template <typename T>
void append_le(std::string& blob, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  blob.append(bytes, sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::size_t element_size(Precision p) { return p == Precision::f32 ? sizeof(float) : sizeof(double); }

template <typename T>
Precision precision_of() {
  return sizeof(T) == sizeof(float) ? Precision::f32 : Precision::f64;
}

}  // namespace

const TensorEntry* Manifest::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string config_to_json(const EncoderConfig& c) {
  json j = {
      {"layers", c.layers},
      {"embed_dim", c.embed_dim},
      {"heads", c.heads},
      {"ff_dim", c.ff_dim},
      {"max_positions", c.max_positions},
      {"vocab_size", c.vocab_size},
      {"pattern", std::string(to_string(c.pattern))},
      {"window", c.window.to_string()},
      {"global_every", c.global_every},
      {"precision", std::string(to_string(c.precision))},
      {"padding", std::string(to_string(c.padding))},
  };
  return j.dump(2) + "\n";
}

EncoderConfig config_from_json(const std::string& text) {
  EncoderConfig c;
  try {
    const auto j = json::parse(text);
    c.layers = j.at("layers").get<Index>();
    c.embed_dim = j.at("embed_dim").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.ff_dim = j.at("ff_dim").get<Index>();
    c.max_positions = j.at("max_positions").get<Index>();
    c.vocab_size = j.at("vocab_size").get<Index>();
    c.pattern = parse_pattern_kind(j.at("pattern").get<std::string>());
    c.window = Window::parse(j.at("window").get<std::string>());
    c.global_every = j.value("global_every", std::size_t{30});
    c.precision = parse_precision(j.value("precision", std::string("f64")));
    c.padding = parse_padding_mode(j.value("padding", std::string("exclude")));
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string manifest_to_json(const Manifest& m) {
  json tensors = json::array();
  for (const auto& t : m.tensors)
    tensors.push_back({{"name", t.name},
                       {"dtype", std::string(to_string(t.dtype))},
                       {"shape", t.shape},
                       {"offset", t.offset},
                       {"nbytes", t.nbytes}});
  return json{{"byte_order", m.byte_order}, {"tensors", tensors}}.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
  Manifest m;
  try {
    const auto j = json::parse(text);
    m.byte_order = j.at("byte_order").get<std::string>();
    for (const auto& t : j.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = parse_precision(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<std::vector<std::int64_t>>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
      m.tensors.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  if (m.byte_order != "little") throw FormatError("manifest: unsupported byte order " + m.byte_order);
  return m;
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& dir, const Vocabulary* vocab) {
  std::filesystem::create_directories(dir);
  Manifest manifest;
  std::string blob;
  model.weights.visit([&](const std::string& name, const Matrix<T>& m) {
    TensorEntry e{name, precision_of<T>(), {m.rows(), m.cols()}, blob.size(), m.size() * sizeof(T)};
    for (Index i = 0; i < m.size(); ++i) append_le<T>(blob, m.data()[i]);
    manifest.tensors.push_back(std::move(e));
  });
  auto config = model.config;
  config.precision = precision_of<T>();
  write_file(dir / "config.json", config_to_json(config));
  write_file(dir / "weights.bin", blob);
  write_file(dir / "manifest.json", manifest_to_json(manifest));
  if (vocab) {
    std::string text;
    for (std::size_t i = 3; i < vocab->size(); ++i) text += vocab->tokens()[i] + "\n";
    write_file(dir / "vocab.txt", text);
  }
}

template <typename T>
Model<T> load_model(const std::filesystem::path& dir) {
  const auto config = config_from_json(read_file(dir / "config.json"));
  const auto manifest = manifest_from_json(read_file(dir / "manifest.json"));
  const auto blob = read_file(dir / "weights.bin");

  // Shapes come from a freshly initialized model so a manifest cannot add,
  // drop or reshape tensors silently.
  auto weights = EncoderWeights<T>::initialize(config, 0);
  std::size_t seen = 0;
  weights.visit([&](const std::string& name, Matrix<T>& m) {
    const auto* e = manifest.find(name);
    if (!e) throw FormatError("manifest: missing tensor " + name);
    if (e->shape != std::vector<std::int64_t>{m.rows(), m.cols()})
      throw FormatError("manifest: shape mismatch for " + name);
    const std::size_t width = element_size(e->dtype);
    if (e->nbytes != m.size() * width || e->offset + e->nbytes > blob.size())
      throw FormatError("manifest: byte range of " + name + " does not fit the blob");
    const char* p = blob.data() + e->offset;
    for (Index i = 0; i < m.size(); ++i, p += width)
      m.data()[i] = e->dtype == Precision::f32 ? static_cast<T>(read_le<float>(p)) : static_cast<T>(read_le<double>(p));
    ++seen;
  });
  if (seen != manifest.tensors.size()) throw FormatError("manifest: unexpected extra tensors");
  return Model<T>(config, std::move(weights));
}

std::optional<Vocabulary> load_vocabulary(const std::filesystem::path& dir) {
  const auto path = dir / "vocab.txt";
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::istringstream in(read_file(path));
  std::vector<std::string> terms;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) terms.push_back(line);
  return Vocabulary(terms);
}

template void save_model<float>(const Model<float>&, const std::filesystem::path&, const Vocabulary*);
template void save_model<double>(const Model<double>&, const std::filesystem::path&, const Vocabulary*);
template Model<float> load_model<float>(const std::filesystem::path&);
template Model<double> load_model<double>(const std::filesystem::path&);

}  // namespace sce::io
