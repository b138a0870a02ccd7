#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "owm/layers.hpp"
#include "owm/views.hpp"

namespace owm::generator {

enum class AttentionPattern { Full, BlockCausal };

inline const char* pattern_name(AttentionPattern p) { return p == AttentionPattern::Full ? "full" : "block_causal"; }

struct GeneratorConfig {
  int width = 64;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int horizon = 8;          // future steps h
  int action_dim = 4;       // D_a
  int latent_dim = 64;      // D_z, equal to the encoder width
  int state_dim = 3;        // D_s
  int num_tasks = 3;
  int tokens_per_view = 1;  // k
  bool latent_branch = true;
  AttentionPattern pattern = AttentionPattern::Full;
  int time_embed_dim = 64;

  int context_length() const { return kViewCount * tokens_per_view + 2; }
  int step_block() const { return latent_branch ? kViewCount * tokens_per_view + 1 : 1; }
  int sequence_length() const { return context_length() + horizon * step_block(); }

  void validate() const {
    if (width % heads != 0) {
      throw ConfigError("generator: width " + std::to_string(width) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (horizon < 0) throw ConfigError("generator: horizon must be >= 0");
    if (tokens_per_view < 1) throw ConfigError("generator: tokens_per_view must be >= 1");
    if (time_embed_dim % 2 != 0) throw ConfigError("generator: time_embed_dim must be even");
  }

  BlockConfig block() const { return {width, heads, mlp_ratio * width, true}; }
};

/// Token roles in the fused sequence.
enum class TokenType : int {
  ContextR = 0, ContextW1, ContextW2, Language, State, QueryR, QueryW1, QueryW2, QueryAction
};
inline constexpr int kTokenTypes = 9;

struct TokenInfo {
  TokenType type;
  int env_step;  // 0 for current context, k = 1..h for future queries
  bool noisy;    // carries the flow-time embedding
};

/// [ctx r, ctx w1, ctx w2, language, state] then, per future step k,
/// [query r, query w1, query w2, action query] (latent queries omitted when
/// the latent branch is off). Each view contributes tokens_per_view tokens.
inline std::vector<TokenInfo> sequence_layout(const GeneratorConfig& cfg) {
  std::vector<TokenInfo> out;
  const int k = cfg.tokens_per_view;
  for (int v = 0; v < kViewCount; ++v)
    for (int i = 0; i < k; ++i) out.push_back({static_cast<TokenType>(v), 0, false});
  out.push_back({TokenType::Language, 0, false});
  out.push_back({TokenType::State, 0, false});
  for (int step = 1; step <= cfg.horizon; ++step) {
    if (cfg.latent_branch) {
      for (int v = 0; v < kViewCount; ++v)
        for (int i = 0; i < k; ++i)
          out.push_back({static_cast<TokenType>(static_cast<int>(TokenType::QueryR) + v), step, true});
    }
    out.push_back({TokenType::QueryAction, step, true});
  }
  return out;
}

/// allowed[i * L + j] == true iff token i may attend to token j.
inline std::vector<bool> attention_mask(const GeneratorConfig& cfg) {
  const auto layout = sequence_layout(cfg);
  const std::size_t l = layout.size();
  std::vector<bool> allowed(l * l, true);
  if (cfg.pattern == AttentionPattern::BlockCausal) {
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) allowed[i * l + j] = layout[j].env_step <= layout[i].env_step;
  }
  return allowed;
}

/// [sin(x w_0), ..., sin(x w_{d/2-1}), cos(x w_0), ...] with w_i = 10000^(-i/(d/2)).
inline std::vector<double> sinusoid(double x, int dim) {
  std::vector<double> out(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * i / half);
    out[static_cast<std::size_t>(i)] = std::sin(x * w);
    out[static_cast<std::size_t>(i + half)] = std::cos(x * w);
  }
  return out;
}

template <class T>
struct FusedSequence {
  Var<T> tokens;  // (B, L, D)
  std::vector<TokenInfo> layout;
};

template <class T>
struct JointVelocities {
  Var<T> v_a;               // (B, h, D_a)
  std::vector<Var<T>> v_z;  // per view (B, h*k, D_z); empty without latent branch
};

inline std::string view_key(int v) { return std::string(view_name(static_cast<View>(v))); }

template <class T>
void init_generator(ParamSet<T>& ps, const GeneratorConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.width;
  for (int v = 0; v < kViewCount; ++v) {
    numerics::add_linear(ps, "gen.ctx." + view_key(v), cfg.latent_dim, d, rng);
    numerics::add_linear(ps, "gen.query." + view_key(v), cfg.latent_dim, d, rng);
  }
  numerics::add_linear(ps, "gen.query.action", cfg.action_dim, d, rng);
  numerics::add_linear(ps, "gen.state", cfg.state_dim, d, rng);
  ps.add("gen.lang", numerics::normal_array<T>(Shape{cfg.num_tasks, d}, 0.5, rng));
  ps.add("gen.type", numerics::normal_array<T>(Shape{kTokenTypes, d}, 0.5, rng));
  numerics::add_linear(ps, "gen.time", cfg.time_embed_dim, d, rng);
  for (int i = 0; i < cfg.layers; ++i) add_block(ps, "gen.block" + std::to_string(i), cfg.block(), rng);
  add_layer_norm(ps, "gen.ln_out", d);
  numerics::add_linear(ps, "gen.head.action", d, cfg.action_dim, rng, 0.02);
  for (int v = 0; v < kViewCount; ++v) numerics::add_linear(ps, "gen.head." + view_key(v), d, cfg.latent_dim, rng, 0.02);
}

/// Assembles the fused token sequence. `world` holds one (B, k, D_z) clean
/// context token block per view; `noisy_z` one (B, h*k, D_z) block per view
/// (empty when the latent branch is off); `noisy_a` is (B, h, D_a).
template <class T>
FusedSequence<T> build_sequence(const BoundParams<T>& p, const GeneratorConfig& cfg, const std::vector<Var<T>>& world,
                                const std::vector<int>& language_ids, const Var<T>& state,
                                const std::vector<Var<T>>& noisy_z, const Var<T>& noisy_a,
                                const std::vector<double>& t) {
  cfg.validate();
  Tape<T>& tape = p.tape();
  const int b = state.dim(0), d = cfg.width, k = cfg.tokens_per_view, h = cfg.horizon;
  if (static_cast<int>(world.size()) != kViewCount) throw StructuralError("build_sequence: need one world block per view");
  if (static_cast<int>(language_ids.size()) != b || static_cast<int>(t.size()) != b) {
    throw StructuralError("build_sequence: language ids / flow times must have one entry per batch row");
  }
  for (const auto& w : world) {
    if (w.shape() != Shape{b, k, cfg.latent_dim}) {
      throw StructuralError("build_sequence: world block " + numerics::shape_string(w.shape()) + " expected " +
                            numerics::shape_string(Shape{b, k, cfg.latent_dim}));
    }
  }
  if (h > 0 && noisy_a.shape() != Shape{b, h, cfg.action_dim}) {
    throw StructuralError("build_sequence: horizon mismatch, action queries " +
                          numerics::shape_string(noisy_a.shape()) + " for h=" + std::to_string(h));
  }
  if (cfg.latent_branch && h > 0) {
    if (static_cast<int>(noisy_z.size()) != kViewCount) throw StructuralError("build_sequence: need latent queries per view");
    for (const auto& z : noisy_z) {
      if (z.shape() != Shape{b, h * k, cfg.latent_dim}) {
        throw StructuralError("build_sequence: horizon mismatch, latent queries " + numerics::shape_string(z.shape()) +
                              " for h=" + std::to_string(h));
      }
    }
  }

  std::vector<Var<T>> context;
  for (int v = 0; v < kViewCount; ++v) context.push_back(numerics::linear(p, "gen.ctx." + view_key(v), world[static_cast<std::size_t>(v)]));
  context.push_back(numerics::reshape(numerics::select(p["gen.lang"], 0, language_ids, b), Shape{b, 1, d}));
  context.push_back(numerics::reshape(numerics::linear(p, "gen.state", state), Shape{b, 1, d}));
  auto seq = numerics::concat(std::span<const Var<T>>(context), 1);

  if (h > 0) {
    std::vector<Var<T>> step_parts;
    if (cfg.latent_branch) {
      for (int v = 0; v < kViewCount; ++v) {
        auto q = numerics::linear(p, "gen.query." + view_key(v), noisy_z[static_cast<std::size_t>(v)]);
        step_parts.push_back(numerics::reshape(q, Shape{b, h, k, d}));
      }
    }
    step_parts.push_back(numerics::reshape(numerics::linear(p, "gen.query.action", noisy_a), Shape{b, h, 1, d}));
    auto queries = numerics::concat(std::span<const Var<T>>(step_parts), 2);
    seq = numerics::concat({seq, numerics::reshape(queries, Shape{b, h * cfg.step_block(), d})}, 1);
  }

  const auto layout = sequence_layout(cfg);
  const int l = static_cast<int>(layout.size());
  std::vector<int> types;
  Array<T> env_time(Shape{l, d});
  Array<T> noisy_mask(Shape{l, 1});
  for (int i = 0; i < l; ++i) {
    const auto& info = layout[static_cast<std::size_t>(i)];
    types.push_back(static_cast<int>(info.type));
    const auto e = sinusoid(static_cast<double>(info.env_step), d);
    for (int j = 0; j < d; ++j) env_time[static_cast<std::size_t>(i * d + j)] = static_cast<T>(e[static_cast<std::size_t>(j)]);
    noisy_mask[static_cast<std::size_t>(i)] = info.noisy ? T{1} : T{0};
  }
  seq = numerics::add(seq, numerics::select(p["gen.type"], 0, types, l));
  seq = numerics::add(seq, tape.constant(std::move(env_time)));

  Array<T> temb(Shape{b, 1, cfg.time_embed_dim});
  for (int r = 0; r < b; ++r) {
    const auto e = sinusoid(1000.0 * t[static_cast<std::size_t>(r)], cfg.time_embed_dim);
    for (int j = 0; j < cfg.time_embed_dim; ++j)
      temb[static_cast<std::size_t>(r * cfg.time_embed_dim + j)] = static_cast<T>(e[static_cast<std::size_t>(j)]);
  }
  auto tproj = numerics::linear(p, "gen.time", tape.constant(std::move(temb)));  // (B, 1, D)
  seq = numerics::add(seq, numerics::mul(tproj, tape.constant(std::move(noisy_mask))));
  return {seq, layout};
}

/// Velocities read off the query tokens through branch-specific heads.
template <class T>
JointVelocities<T> forward(const FusedSequence<T>& seq, const BoundParams<T>& p, const GeneratorConfig& cfg) {
  const int l = cfg.sequence_length();
  if (seq.tokens.dim(1) != l) {
    throw StructuralError("generator forward: sequence length " + std::to_string(seq.tokens.dim(1)) +
                          " does not match config length " + std::to_string(l));
  }
  std::optional<Array<T>> mask;
  if (cfg.pattern != AttentionPattern::Full) {
    const auto allowed = attention_mask(cfg);
    mask.emplace(Shape{l, l});
    for (std::size_t i = 0; i < allowed.size(); ++i) (*mask)[i] = allowed[i] ? T{0} : T(-1e9);
  }
  auto x = seq.tokens;
  for (int i = 0; i < cfg.layers; ++i) {
    x = transformer_block(p, "gen.block" + std::to_string(i), cfg.block(), x, mask ? &*mask : nullptr);
    if (!x.value().all_finite()) throw NumericalError("generator forward: non-finite activation after layer " + std::to_string(i));
  }
  x = layer_norm(p, "gen.ln_out", x);

  JointVelocities<T> out;
  const int h = cfg.horizon, k = cfg.tokens_per_view, ctx = cfg.context_length(), step = cfg.step_block();
  if (h == 0) return out;
  std::vector<int> action_pos;
  for (int j = 0; j < h; ++j) action_pos.push_back(ctx + j * step + step - 1);
  out.v_a = numerics::linear(p, "gen.head.action", numerics::select(x, 1, action_pos, h));
  if (cfg.latent_branch) {
    for (int v = 0; v < kViewCount; ++v) {
      std::vector<int> pos;
      for (int j = 0; j < h; ++j)
        for (int i = 0; i < k; ++i) pos.push_back(ctx + j * step + v * k + i);
      out.v_z.push_back(numerics::linear(p, "gen.head." + view_key(v), numerics::select(x, 1, pos, h * k)));
    }
  }
  return out;
}

}  // namespace owm::generator
