#pragma once

#include <array>
#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "owm/encoder.hpp"

// Adaptive attention pooling: each view's N tokens per frame are scored by
// three strategies, each score vector becomes a temperature softmax over
// tokens, the weighted tokens are reduced per strategy, and a learnable
// convex combination of the three pooled vectors yields one world token.
namespace owm::pooling {

using encoder::TokenGrid;

enum class Strategy { Max = 0, Sum = 1, Learn = 2 };

inline constexpr std::array<Strategy, 3> kStrategies{Strategy::Max, Strategy::Sum, Strategy::Learn};

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Max: return "max";
    case Strategy::Sum: return "sum";
    case Strategy::Learn: return "learn";
  }
  return "?";
}

struct PoolingConfig {
  double tau = 0.1;
  /// Temperature of the branch-fusion softmax; <= 0 means "same as tau".
  double fusion_tau = 0.0;
  /// Branches taking part in the fusion (Max, Sum, Learn).
  std::array<bool, 3> branches{true, true, true};
  /// World tokens emitted per view and frame; 1 is the convex reduction.
  int tokens_per_view = 1;

  double effective_fusion_tau() const { return fusion_tau > 0 ? fusion_tau : tau; }

  void validate() const {
    if (!(tau > 0)) throw ConfigError("pooling: tau must be positive, got " + std::to_string(tau));
    if (!(effective_fusion_tau() > 0)) throw ConfigError("pooling: fusion_tau must be positive");
    if (std::none_of(branches.begin(), branches.end(), [](bool b) { return b; })) {
      throw ConfigError("pooling: at least one branch must be enabled");
    }
    if (tokens_per_view < 1) throw ConfigError("pooling: tokens_per_view must be >= 1");
  }
};

/// The view-specific scorer Q_theta: D -> D/2 -> 1 with GELU.
template <class T>
struct LearnedScorer {
  const BoundParams<T>* params = nullptr;
  std::string prefix;
};

template <class T>
struct BranchPools {
  Var<T> p_max, p_sum, p_learn;  // each (B, T, D)

  const Var<T>& get(Strategy s) const {
    return s == Strategy::Max ? p_max : (s == Strategy::Sum ? p_sum : p_learn);
  }
};

/// One world token per frame: z is (B, T, k, D) with k = tokens_per_view.
template <class T>
struct WorldToken {
  Var<T> z;
  View view = View::R;
};

inline std::string scorer_prefix(View v) { return "pool." + std::string(view_name(v)) + ".scorer"; }
inline std::string alpha_name(View v) { return "pool." + std::string(view_name(v)) + ".alpha"; }

template <class T>
void init_pooling(ParamSet<T>& ps, int width, Rng& rng) {
  const int hidden = std::max(1, width / 2);
  for (View v : kViews) {
    numerics::add_linear(ps, scorer_prefix(v) + ".fc1", width, hidden, rng);
    numerics::add_linear(ps, scorer_prefix(v) + ".fc2", hidden, 1, rng, 0.0);
    ps.add(alpha_name(v), Array<T>(Shape{3}, T{0}));
  }
}

template <class T>
LearnedScorer<T> scorer_for(const BoundParams<T>& p, View v) {
  return {&p, scorer_prefix(v)};
}

/// (B, T, N, D) -> (B, T, N) per-token scores.
template <class T>
Var<T> score_tokens(const Var<T>& grid, Strategy strategy, const std::optional<LearnedScorer<T>>& scorer) {
  switch (strategy) {
    case Strategy::Max: return numerics::max(grid, -1);
    case Strategy::Sum: return numerics::sum(grid, -1);
    case Strategy::Learn: {
      if (!scorer || !scorer->params) throw ConfigError("score_tokens: LEARN strategy requires a scorer");
      const auto& p = *scorer->params;
      auto h = numerics::gelu(numerics::linear(p, scorer->prefix + ".fc1", grid));
      auto s = numerics::linear(p, scorer->prefix + ".fc2", h);  // (B, T, N, 1)
      Shape shape = grid.shape();
      shape.pop_back();
      return numerics::reshape(s, shape);
    }
  }
  throw ConfigError("score_tokens: unknown strategy");
}

/// Softmax of scores / tau over the token axis.
template <class T>
Var<T> token_weights(const Var<T>& scores, double tau) {
  if (!(tau > 0)) throw ConfigError("token_weights: tau must be positive, got " + std::to_string(tau));
  return numerics::softmax(numerics::scale(scores, static_cast<T>(1.0 / tau)), -1);
}

/// SUM/LEARN: sum_n w_n x_n. MAX: elementwise max_n (w_n x_n).
template <class T>
Var<T> pool_branch(const Var<T>& grid, const Var<T>& weights, Strategy strategy) {
  Shape ws = grid.shape();
  ws.back() = 1;
  if (weights.size() != numerics::element_count(ws)) {
    throw StructuralError("pool_branch: weights " + numerics::shape_string(weights.shape()) +
                          " do not match grid " + numerics::shape_string(grid.shape()));
  }
  auto weighted = numerics::mul(grid, numerics::reshape(weights, ws));
  const int token_axis = grid.rank() - 2;
  return strategy == Strategy::Max ? numerics::max(weighted, token_axis) : numerics::sum(weighted, token_axis);
}

/// beta = softmax(alpha / tau) over the enabled branches; disabled branches
/// get no entry. Result has one entry per enabled branch.
template <class T>
Var<T> fusion_weights(const Var<T>& alpha, const PoolingConfig& cfg) {
  std::vector<int> enabled;
  for (int m = 0; m < 3; ++m)
    if (cfg.branches[static_cast<std::size_t>(m)]) enabled.push_back(m);
  const auto count = static_cast<int>(enabled.size());
  auto a = count == 3 ? alpha : numerics::select(alpha, 0, enabled, count);
  return numerics::softmax(numerics::scale(a, static_cast<T>(1.0 / cfg.effective_fusion_tau())), 0);
}

/// Z = sum_m beta_m p_m, shaped (B, T, 1, D).
template <class T>
WorldToken<T> fuse_views(const BranchPools<T>& pools, const Var<T>& alpha, const PoolingConfig& cfg, View view) {
  const Shape& s = pools.p_sum.valid() ? pools.p_sum.shape() : pools.p_max.shape();
  const Shape one{s[0], s[1], 1, s[2]};
  std::vector<Var<T>> parts;
  for (Strategy st : kStrategies) {
    if (!cfg.branches[static_cast<std::size_t>(st)]) continue;
    const auto& p = pools.get(st);
    if (p.shape() != s) {
      throw StructuralError("fuse_views: branch pools disagree in shape: " + numerics::shape_string(p.shape()) +
                            " vs " + numerics::shape_string(s));
    }
    parts.push_back(numerics::reshape(p, one));
  }
  auto stacked = numerics::concat(std::span<const Var<T>>(parts), 2);  // (B, T, M, D)
  auto beta = fusion_weights(alpha, cfg);
  auto weighted = numerics::mul(stacked, numerics::reshape(beta, Shape{static_cast<int>(parts.size()), 1}));
  return {numerics::sum(weighted, 2, true), view};
}

template <class T>
struct PoolTrace {
  std::array<Var<T>, 3> weights;  // per strategy (B, T, N); invalid if disabled
  BranchPools<T> pools;
  Var<T> beta;
};

/// Top-k variant: the k tokens with the largest fused token weight
/// sum_m beta_m w_m, each scaled by k times its renormalized weight.
template <class T>
Var<T> select_top_tokens(const Var<T>& grid, const Var<T>& fused, int k) {
  const int b = grid.dim(0), t = grid.dim(1), n = grid.dim(2);
  if (k > n) throw ConfigError("pooling: tokens_per_view " + std::to_string(k) + " exceeds N=" + std::to_string(n));
  const auto& fv = fused.value().vec();
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(b * t * k));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int f = 0; f < b * t; ++f) {
    std::iota(order.begin(), order.end(), 0);
    const T* w = fv.data() + static_cast<std::size_t>(f) * n;
    std::stable_sort(order.begin(), order.end(), [w](int x, int y) { return w[x] > w[y]; });
    idx.insert(idx.end(), order.begin(), order.begin() + k);
  }
  auto chosen = numerics::select(grid, 2, idx, k);                          // (B, T, k, D)
  auto wsel = numerics::select(numerics::reshape(fused, Shape{b, t, n, 1}), 2, idx, k);  // (B, T, k, 1)
  auto norm = numerics::sum(wsel, 2, true);
  auto renorm = numerics::scale(numerics::div(wsel, norm), static_cast<T>(k));
  return numerics::mul(chosen, renorm);
}

/// Full pipeline for one view: scores -> token weights -> branch pools ->
/// fusion. Output (B, T, k, D), independent of N.
template <class T>
WorldToken<T> pool_view(const TokenGrid<T>& grid, const BoundParams<T>& p, const PoolingConfig& cfg,
                        PoolTrace<T>* trace = nullptr) {
  cfg.validate();
  if (grid.tokens.rank() != 4) {
    throw StructuralError("pool_view: expected (B,T,N,D) grid, got " + numerics::shape_string(grid.tokens.shape()));
  }
  const auto scorer = std::optional<LearnedScorer<T>>(scorer_for(p, grid.view));
  BranchPools<T> pools;
  std::array<Var<T>, 3> weights;
  for (Strategy st : kStrategies) {
    if (!cfg.branches[static_cast<std::size_t>(st)]) continue;
    auto w = token_weights(score_tokens(grid.tokens, st, scorer), cfg.tau);
    weights[static_cast<std::size_t>(st)] = w;
    auto pooled = pool_branch(grid.tokens, w, st);
    (st == Strategy::Max ? pools.p_max : st == Strategy::Sum ? pools.p_sum : pools.p_learn) = pooled;
  }
  const auto alpha = p[alpha_name(grid.view)];
  WorldToken<T> out;
  if (cfg.tokens_per_view == 1) {
    out = fuse_views(pools, alpha, cfg, grid.view);
  } else {
    auto beta = fusion_weights(alpha, cfg);
    Var<T> fused;
    int j = 0;
    for (Strategy st : kStrategies) {
      if (!cfg.branches[static_cast<std::size_t>(st)]) continue;
      auto term = numerics::mul(weights[static_cast<std::size_t>(st)], numerics::slice(beta, 0, j, j + 1));
      fused = fused.valid() ? numerics::add(fused, term) : term;
      ++j;
    }
    out = {select_top_tokens(grid.tokens, fused, cfg.tokens_per_view), grid.view};
  }
  if (trace) {
    trace->weights = weights;
    trace->pools = pools;
    trace->beta = fusion_weights(alpha, cfg);
  }
  return out;
}

/// Current fusion weights of a view as plain numbers (Max, Sum, Learn order;
/// disabled branches report 0).
template <class T>
std::array<double, 3> fusion_beta(const ParamSet<T>& params, View v, const PoolingConfig& cfg) {
  Tape<T> tape;
  auto beta = fusion_weights(tape.constant(params.get(alpha_name(v))), cfg);
  std::array<double, 3> out{0, 0, 0};
  int j = 0;
  for (int m = 0; m < 3; ++m)
    if (cfg.branches[static_cast<std::size_t>(m)]) out[static_cast<std::size_t>(m)] = beta.value()[static_cast<std::size_t>(j++)];
  return out;
}

}  // namespace owm::pooling
