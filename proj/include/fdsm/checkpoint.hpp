#pragma once

// Binary checkpoints for MLP models.
//
// Layout, all integers u32 little-endian, all values f64 little-endian:
//   "FDSM" | version | model kind | layer count |
//   per layer: fan_in | fan_out | weights (fan_in*fan_out, row-major) | biases (fan_out)

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fdsm/models.hpp"

namespace fdsm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint32_t { kEnergy = 0, kScore = 1 };

struct CheckpointLayer {
  std::uint32_t fan_in = 0, fan_out = 0;
  std::vector<double> weights, biases;
};

struct Checkpoint {
  ModelKind kind = ModelKind::kEnergy;
  std::vector<CheckpointLayer> layers;
};

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  std::array<unsigned char, sizeof(U)> b{};
  std::memcpy(b.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(U))) throw CheckpointError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  U v;
  std::memcpy(&v, b.data(), sizeof(U));
  return v;
}

template <class S>
Checkpoint to_checkpoint(const Mlp<S>& net, ModelKind kind) {
  Checkpoint c;
  c.kind = kind;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    CheckpointLayer layer;
    layer.fan_in = static_cast<std::uint32_t>(net.widths()[l]);
    layer.fan_out = static_cast<std::uint32_t>(net.widths()[l + 1]);
    for (S w : net.weight(l).values()) layer.weights.push_back(static_cast<double>(w));
    for (S b : net.bias(l).values()) layer.biases.push_back(static_cast<double>(b));
    c.layers.push_back(std::move(layer));
  }
  return c;
}

template <class S>
Mlp<S> to_mlp(const Checkpoint& c) {
  std::vector<Tensor<S>> ws, bs;
  for (const auto& l : c.layers) {
    Tensor<S> w({l.fan_in, l.fan_out}), b({l.fan_out});
    for (std::size_t i = 0; i < l.weights.size(); ++i) w[i] = static_cast<S>(l.weights[i]);
    for (std::size_t i = 0; i < l.biases.size(); ++i) b[i] = static_cast<S>(l.biases[i]);
    ws.push_back(std::move(w));
    bs.push_back(std::move(b));
  }
  return Mlp<S>::from_layers(ws, bs);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write("FDSM", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.kind));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.layers.size()));
  for (const auto& l : c.layers) {
    detail::put_le(os, l.fan_in);
    detail::put_le(os, l.fan_out);
    for (double w : l.weights) detail::put_le(os, w);
    for (double b : l.biases) detail::put_le(os, b);
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "FDSM") throw CheckpointError("checkpoint: bad magic bytes");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  const auto kind = detail::get_le<std::uint32_t>(is);
  if (kind > 1) throw CheckpointError("checkpoint: unknown model kind " + std::to_string(kind));
  c.kind = static_cast<ModelKind>(kind);
  const auto layers = detail::get_le<std::uint32_t>(is);
  if (layers == 0) throw CheckpointError("checkpoint: no layers");
  for (std::uint32_t i = 0; i < layers; ++i) {
    CheckpointLayer l;
    l.fan_in = detail::get_le<std::uint32_t>(is);
    l.fan_out = detail::get_le<std::uint32_t>(is);
    if (i > 0 && l.fan_in != c.layers.back().fan_out) throw CheckpointError("checkpoint: layer widths do not chain");
    l.weights.resize(std::size_t{l.fan_in} * l.fan_out);
    l.biases.resize(l.fan_out);
    for (auto& w : l.weights) w = detail::get_le<double>(is);
    for (auto& b : l.biases) b = detail::get_le<double>(is);
    c.layers.push_back(std::move(l));
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

template <class S>
Checkpoint make_checkpoint(const MlpEnergyModel<S>& m) {
  return detail::to_checkpoint(m.network(), ModelKind::kEnergy);
}
template <class S>
Checkpoint make_checkpoint(const MlpScoreModel<S>& m) {
  return detail::to_checkpoint(m.network(), ModelKind::kScore);
}

template <class S>
using AnyMlpModel = std::variant<MlpEnergyModel<S>, MlpScoreModel<S>>;

template <class S>
AnyMlpModel<S> model_from_checkpoint(const Checkpoint& c) {
  if (c.kind == ModelKind::kEnergy) return MlpEnergyModel<S>(detail::to_mlp<S>(c));
  return MlpScoreModel<S>(detail::to_mlp<S>(c));
}

}  // namespace fdsm
