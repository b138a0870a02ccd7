#pragma once

#include <cmath>
#include <string>

#include "owm/numerics/params.hpp"

namespace owm {

using numerics::Array;
using numerics::BoundParams;
using numerics::ParamSet;
using numerics::Rng;
using numerics::Shape;
using numerics::Tape;
using numerics::Var;

struct BlockConfig {
  int width = 64;
  int heads = 4;
  int mlp_width = 256;
  bool attention = true;
};

template <class T>
void add_layer_norm(ParamSet<T>& ps, const std::string& prefix, int width) {
  ps.add(prefix + ".gain", Array<T>(Shape{width}, T{1}));
  ps.add(prefix + ".bias", Array<T>(Shape{width}, T{0}));
}

template <class T>
Var<T> layer_norm(const BoundParams<T>& p, const std::string& prefix, const Var<T>& x) {
  return numerics::layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"]);
}

/// Pre-norm transformer block: x + MHA(LN(x)), then + MLP(LN(x)).
template <class T>
void add_block(ParamSet<T>& ps, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
  if (cfg.width % cfg.heads != 0) {
    throw ConfigError("block " + prefix + ": width " + std::to_string(cfg.width) +
                      " not divisible by heads " + std::to_string(cfg.heads));
  }
  add_layer_norm(ps, prefix + ".ln1", cfg.width);
  numerics::add_linear(ps, prefix + ".qkv", cfg.width, 3 * cfg.width, rng);
  numerics::add_linear(ps, prefix + ".proj", cfg.width, cfg.width, rng,
                       0.5 / std::sqrt(static_cast<double>(cfg.width)));
  add_layer_norm(ps, prefix + ".ln2", cfg.width);
  numerics::add_linear(ps, prefix + ".fc1", cfg.width, cfg.mlp_width, rng);
  numerics::add_linear(ps, prefix + ".fc2", cfg.mlp_width, cfg.width, rng,
                       0.5 / std::sqrt(static_cast<double>(cfg.mlp_width)));
}

/// Multi-head self-attention over x (B, L, D). `mask`, when given, is an
/// additive (L, L) constant (0 = visible, large negative = blocked).
template <class T>
Var<T> self_attention(const BoundParams<T>& p, const std::string& prefix, const BlockConfig& cfg,
                      const Var<T>& x, const Array<T>* mask) {
  auto qkv = numerics::linear(p, prefix + ".qkv", x);  // (B, L, 3D)
  return numerics::linear(p, prefix + ".proj", numerics::multi_head_attention(qkv, cfg.heads, mask));
}

template <class T>
Var<T> transformer_block(const BoundParams<T>& p, const std::string& prefix, const BlockConfig& cfg,
                         const Var<T>& x, const Array<T>* mask = nullptr) {
  Var<T> h = x;
  if (cfg.attention) {
    h = numerics::add(h, self_attention(p, prefix, cfg, layer_norm(p, prefix + ".ln1", h), mask));
  }
  auto m = numerics::gelu(numerics::linear(p, prefix + ".fc1", layer_norm(p, prefix + ".ln2", h)));
  return numerics::add(h, numerics::linear(p, prefix + ".fc2", m));
}

}  // namespace owm
