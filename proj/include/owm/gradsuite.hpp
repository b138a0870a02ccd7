#pragma once

#include <string>
#include <vector>

#include "owm/encoder.hpp"
#include "owm/flowmatch.hpp"
#include "owm/generator.hpp"
#include "owm/numerics/gradcheck.hpp"
#include "owm/pooling.hpp"

// Reverse-mode vs finite-difference checks over every differentiable piece
// of the model, in double precision on small shapes.
namespace owm::gradsuite {

using numerics::Array;
using numerics::BoundParams;
using numerics::GradReport;
using numerics::ParamSet;
using numerics::Rng;
using numerics::ScalarFn;
using numerics::Shape;
using numerics::Tape;
using numerics::Var;

enum class Scope { All, Pooling, Flow, Generator, Encoder, Ops };

inline Scope parse_scope(const std::string& s) {
  if (s == "all") return Scope::All;
  if (s == "pooling") return Scope::Pooling;
  if (s == "flow") return Scope::Flow;
  if (s == "generator") return Scope::Generator;
  if (s == "encoder") return Scope::Encoder;
  if (s == "ops") return Scope::Ops;
  throw ConfigError("unknown gradcheck scope '" + s + "' (valid: all, pooling, flow, generator, encoder, ops)");
}

struct Case {
  std::string name;
  ScalarFn<double> f;
  std::vector<Array<double>> inputs;
};

struct Options {
  double tolerance = 1e-5;
  int probes = 16;
  std::uint64_t seed = 0;
  /// Cases whose name contains this text get a doubled gradient while their
  /// value stays unchanged. Empty disables the fault.
  std::string fault;
};

namespace detail {

/// Fixed random linear readout so that every output coordinate matters.
inline Var<double> readout(const Var<double>& y, std::uint64_t salt) {
  Rng r(0x5eed ^ salt);
  return numerics::sum_all(numerics::mul(y, y.tape().constant(numerics::normal_array<double>(y.shape(), 1.0, r))));
}

inline Array<double> randn(Shape s, Rng& rng, double sd = 1.0) { return numerics::normal_array<double>(std::move(s), sd, rng); }

/// A case whose leading inputs are `extra` arrays followed by every entry of
/// `params`. `body` sees the extras and the bound parameters.
template <class Body>
Case with_params(std::string name, std::vector<Array<double>> extra, const ParamSet<double>& params, Body body) {
  const std::size_t n_extra = extra.size();
  const auto names = params.names();
  std::vector<Array<double>> inputs = std::move(extra);
  for (std::size_t i = 0; i < params.size(); ++i) inputs.push_back(params.at(i));
  ScalarFn<double> f = [n_extra, names, body](Tape<double>& tape, std::span<const Var<double>> vars) {
    BoundParams<double> p(tape, names, vars.subspan(n_extra));
    return body(vars.first(n_extra), p);
  };
  return {std::move(name), std::move(f), std::move(inputs)};
}

inline Case unary_case(std::string name, Array<double> x, Var<double> (*op)(const Var<double>&), std::uint64_t salt) {
  return {std::move(name),
          [op, salt](Tape<double>&, std::span<const Var<double>> v) { return readout(op(v[0]), salt); },
          {std::move(x)}};
}

}  // namespace detail

inline std::vector<Case> pooling_cases(std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed ^ 0x9001);
  std::vector<Case> out;
  for (View view : {View::R, View::W2}) {
    ParamSet<double> all;
    pooling::init_pooling(all, 8, rng);
    ParamSet<double> ps;
    for (std::size_t i = 0; i < all.size(); ++i) {
      const auto& n = all.names()[i];
      if (n.rfind("pool." + std::string(view_name(view)) + ".", 0) != 0) continue;
      // fc2 starts at zero in the model; give it a generic value here
      ps.add(n, randn(all.at(i).shape(), rng, 0.5));
    }
    pooling::PoolingConfig cfg;
    cfg.tau = view == View::R ? 0.5 : 1.0;
    cfg.fusion_tau = view == View::R ? 0.0 : 1.0;
    out.push_back(with_params("pool_view[" + std::string(view_name(view)) + "]", {randn({2, 1, 4, 8}, rng)}, ps,
                              [cfg, view](std::span<const Var<double>> x, const BoundParams<double>& p) {
                                return readout(pooling::pool_view<double>({x[0], view}, p, cfg).z, 11);
                              }));
  }
  {
    pooling::PoolingConfig cfg;
    cfg.fusion_tau = 0.5;
    cfg.branches = {true, false, true};
    out.push_back({"fusion_weights",
                   [cfg](Tape<double>&, std::span<const Var<double>> v) {
                     return readout(pooling::fusion_weights(v[0], cfg), 12);
                   },
                   {randn({3}, rng)}});
  }
  return out;
}

inline std::vector<Case> flow_cases(std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed ^ 0xf10);
  std::vector<Case> out;
  for (const char* metric : {"L1L1", "L2L2", "L1L2"}) {
    flow::LossWeights w;
    w.action_metric = flow::parse_metric(std::string(metric).substr(0, 2));
    w.latent_metric = flow::parse_metric(std::string(metric).substr(2, 2));
    w.lambda_z = {0.1, 0.2, 0.3};
    std::vector<Array<double>> in;
    for (int i = 0; i < 2; ++i) {
      in.push_back(randn({2, 3, 4}, rng));
      for (int v = 0; v < kViewCount; ++v) in.push_back(randn({2, 3, 5}, rng));
    }
    out.push_back({std::string("joint_cfm_loss[") + metric + "]",
                   [w](Tape<double>&, std::span<const Var<double>> v) {
                     const std::vector<Var<double>> pz(v.begin() + 1, v.begin() + 4), uz(v.begin() + 5, v.begin() + 8);
                     return flow::joint_cfm_loss(v[0], pz, v[4], uz, w).total;
                   },
                   std::move(in)});
  }
  return out;
}

inline generator::GeneratorConfig small_generator(generator::AttentionPattern pattern) {
  generator::GeneratorConfig g;
  g.width = 16;
  g.layers = 2;
  g.heads = 2;
  g.mlp_ratio = 2;
  g.horizon = 2;
  g.latent_dim = 8;
  g.time_embed_dim = 8;
  g.pattern = pattern;
  return g;
}

inline std::vector<Case> generator_cases(std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed ^ 0x6e4);
  std::vector<Case> out;
  for (auto pattern : {generator::AttentionPattern::Full, generator::AttentionPattern::BlockCausal}) {
    const auto g = small_generator(pattern);
    ParamSet<double> ps;
    generator::init_generator(ps, g, rng);
    // the output heads start near zero; use generic values instead
    ParamSet<double> generic;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& n = ps.names()[i];
      generic.add(n, n.rfind("gen.head.", 0) == 0 ? randn(ps.at(i).shape(), rng, 0.3) : ps.at(i));
    }
    const int b = 2, h = g.horizon, dz = g.latent_dim;
    std::vector<Array<double>> extra;
    for (int v = 0; v < kViewCount; ++v) extra.push_back(randn({b, 1, dz}, rng));   // world
    extra.push_back(randn({b, g.state_dim}, rng));                                 // state
    for (int v = 0; v < kViewCount; ++v) extra.push_back(randn({b, h, dz}, rng));   // noisy z
    extra.push_back(randn({b, h, g.action_dim}, rng));                             // noisy a
    extra.push_back(randn({b, h, g.action_dim}, rng));                             // u_a
    for (int v = 0; v < kViewCount; ++v) extra.push_back(randn({b, h, dz}, rng));   // u_z
    flow::LossWeights w;
    out.push_back(with_params(
        std::string("generator∘joint_cfm_loss[") + generator::pattern_name(pattern) + "]", std::move(extra), generic,
        [g, w](std::span<const Var<double>> x, const BoundParams<double>& p) {
          const std::vector<Var<double>> world(x.begin(), x.begin() + 3), nz(x.begin() + 4, x.begin() + 7),
              uz(x.begin() + 9, x.begin() + 12);
          auto seq = generator::build_sequence(p, g, world, {0, 2}, x[3], nz, x[7], {0.3, 0.8});
          auto vel = generator::forward(seq, p, g);
          return flow::joint_cfm_loss(vel.v_a, vel.v_z, x[8], uz, w).total;
        }));
  }
  return out;
}

inline std::vector<Case> encoder_cases(std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed ^ 0xe4c);
  encoder::EncoderConfig cfg;
  cfg.image_size = 8;
  cfg.patch = 4;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.mlp_ratio = 2;
  ParamSet<double> ps;
  encoder::init_encoder(ps, cfg, rng);
  Array<double> pixels(Shape{2, 1, 8, 8, 3});
  for (auto& v : pixels.vec()) v = rng.uniform();
  return {with_params("encode", {}, ps, [cfg, pixels](std::span<const Var<double>>, const BoundParams<double>& p) {
    return readout(encoder::encode<double>({pixels, View::W1}, p, cfg).tokens, 21);
  })};
}

inline std::vector<Case> op_cases(std::uint64_t seed) {
  using namespace detail;
  namespace nx = numerics;
  Rng rng(seed ^ 0x0b5);
  std::vector<Case> out;
  using V = Var<double>;
  auto two = [&](std::string name, Array<double> a, Array<double> b, auto op) {
    out.push_back({std::move(name),
                   [op](Tape<double>&, std::span<const V> v) { return readout(op(v[0], v[1]), 31); },
                   {std::move(a), std::move(b)}});
  };
  auto one = [&](std::string name, Array<double> a, auto op) {
    out.push_back({std::move(name), [op](Tape<double>&, std::span<const V> v) { return readout(op(v[0]), 32); },
                   {std::move(a)}});
  };
  two("add", randn({2, 3}, rng), randn({3}, rng), [](const V& a, const V& b) { return nx::add(a, b); });
  two("sub", randn({2, 1, 3}, rng), randn({4, 1}, rng), [](const V& a, const V& b) { return nx::sub(a, b); });
  two("mul", randn({2, 3}, rng), randn({2, 1}, rng), [](const V& a, const V& b) { return nx::mul(a, b); });
  two("div", randn({2, 3}, rng), randn({3}, rng),
      [](const V& a, const V& b) { return nx::div(a, nx::add_scalar(nx::square(b), 1.0)); });
  one("scale", randn({5}, rng), [](const V& a) { return nx::scale(a, -2.5); });
  one("exp", randn({2, 3}, rng), [](const V& a) { return nx::exp(a); });
  one("square", randn({2, 3}, rng), [](const V& a) { return nx::square(a); });
  one("tanh", randn({2, 3}, rng), [](const V& a) { return nx::tanh(a); });
  one("abs", randn({2, 3}, rng), [](const V& a) { return nx::abs(a); });
  one("gelu", randn({2, 3}, rng, 2.0), [](const V& a) { return nx::gelu(a); });
  one("reshape", randn({2, 6}, rng), [](const V& a) { return nx::reshape(a, Shape{3, 4}); });
  two("concat", randn({2, 3}, rng), randn({2, 2}, rng), [](const V& a, const V& b) { return nx::concat({a, b}, 1); });
  one("slice", randn({4, 3}, rng), [](const V& a) { return nx::slice(a, 0, 1, 3); });
  one("permute", randn({2, 3, 4}, rng), [](const V& a) { return nx::permute(a, {2, 0, 1}); });
  one("select", randn({2, 4, 3}, rng), [](const V& a) { return nx::select(a, 1, {3, 0, 0, 1, 2, 2}, 3); });
  one("sum", randn({2, 3, 4}, rng), [](const V& a) { return nx::sum(a, 1); });
  one("mean", randn({2, 3, 4}, rng), [](const V& a) { return nx::mean(a, -1, true); });
  one("max", randn({3, 5}, rng), [](const V& a) { return nx::max(a, 1); });
  one("softmax", randn({2, 5}, rng), [](const V& a) { return nx::softmax(a, -1); });
  out.push_back({"layer_norm",
                 [](Tape<double>&, std::span<const V> v) { return readout(nx::layer_norm(v[0], v[1], v[2]), 33); },
                 {randn({3, 6}, rng), randn({6}, rng), randn({6}, rng)}});
  two("matmul", randn({2, 3, 4}, rng), randn({4, 5}, rng), [](const V& a, const V& b) { return nx::matmul(a, b); });
  two("bmm", randn({2, 3, 4}, rng), randn({2, 4, 5}, rng), [](const V& a, const V& b) { return nx::bmm(a, b); });
  two("bmm[trans]", randn({2, 4, 3}, rng), randn({2, 5, 4}, rng),
      [](const V& a, const V& b) { return nx::bmm(a, b, true, true); });
  out.push_back({"affine",
                 [](Tape<double>&, std::span<const V> v) { return readout(nx::affine(v[0], v[1], v[2]), 34); },
                 {randn({2, 3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)}});
  one("multi_head_attention", randn({2, 5, 12}, rng), [](const V& a) { return nx::multi_head_attention(a, 2); });
  {
    Array<double> mask(Shape{5, 5}, 0.0);
    for (int i = 0; i < 5; ++i)
      for (int j = i + 1; j < 5; ++j) mask[static_cast<std::size_t>(i * 5 + j)] = -1e9;
    one("multi_head_attention[masked]", randn({2, 5, 12}, rng),
        [mask](const V& a) { return nx::multi_head_attention(a, 2, &mask); });
  }
  return out;
}

inline std::vector<Case> cases(Scope scope, std::uint64_t seed = 0) {
  std::vector<Case> out;
  auto take = [&](std::vector<Case> c) {
    for (auto& x : c) out.push_back(std::move(x));
  };
  if (scope == Scope::All || scope == Scope::Ops) take(op_cases(seed));
  if (scope == Scope::All || scope == Scope::Encoder) take(encoder_cases(seed));
  if (scope == Scope::All || scope == Scope::Pooling) take(pooling_cases(seed));
  if (scope == Scope::All || scope == Scope::Flow) take(flow_cases(seed));
  if (scope == Scope::All || scope == Scope::Generator) take(generator_cases(seed));
  return out;
}

/// y + (y - stop_grad(y)): same value, twice the gradient.
inline ScalarFn<double> with_fault(ScalarFn<double> f) {
  return [f](Tape<double>& tape, std::span<const Var<double>> v) {
    const auto y = f(tape, v);
    return numerics::add(y, numerics::sub(y, numerics::detach(y)));
  };
}

inline GradReport run_case(const Case& c, const Options& opt) {
  const bool faulty = !opt.fault.empty() && c.name.find(opt.fault) != std::string::npos;
  return numerics::check_gradients(c.name, faulty ? with_fault(c.f) : c.f, c.inputs, opt.tolerance, opt.probes,
                                   opt.seed);
}

inline std::vector<GradReport> run(Scope scope, const Options& opt) {
  std::vector<GradReport> out;
  for (const auto& c : cases(scope, opt.seed)) out.push_back(run_case(c, opt));
  return out;
}

}  // namespace owm::gradsuite
