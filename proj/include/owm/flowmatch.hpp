#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "owm/numerics/ops.hpp"
#include "owm/numerics/random.hpp"
#include "owm/views.hpp"

// Conditional flow matching on straight (OT displacement) paths shared by an
// action stream and per-view latent streams.
namespace owm::flow {

using numerics::Array;
using numerics::Rng;
using numerics::Shape;
using numerics::Tape;
using numerics::Var;

/// How a Beta(a, b) draw becomes a flow time.
enum class TimeSchedule {
  LowBiased,  // t = 1 - b: density concentrated near t = 0 (data end)
  Literal,    // t = b
};

struct FlowTimeSampler {
  double alpha = 1.5;
  double beta = 1.0;
  TimeSchedule schedule = TimeSchedule::LowBiased;
};

namespace detail {

// Marsaglia-Tsang; shape < 1 handled by the u^(1/a) boost.
inline double gamma_draw(double shape, Rng& rng) {
  if (shape < 1.0) return gamma_draw(shape + 1.0, rng) * std::pow(rng.open_uniform(), 1.0 / shape);
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0, v = 0;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0);
    v = v * v * v;
    const double u = rng.open_uniform();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

inline double beta_draw(double a, double b, Rng& rng) {
  if (b == 1.0) return std::pow(rng.open_uniform(), 1.0 / a);  // inverse CDF of x^a
  if (a == 1.0) return 1.0 - std::pow(rng.open_uniform(), 1.0 / b);
  const double x = gamma_draw(a, rng);
  const double y = gamma_draw(b, rng);
  return x / (x + y);
}

}  // namespace detail

/// Flow time strictly inside (0, 1).
inline double sample_time(const FlowTimeSampler& sampler, Rng& rng) {
  for (;;) {
    const double b = detail::beta_draw(sampler.alpha, sampler.beta, rng);
    const double t = sampler.schedule == TimeSchedule::LowBiased ? 1.0 - b : b;
    if (t > 0.0 && t < 1.0) return t;
  }
}

template <class T>
void require_same_shape(const Array<T>& a, const Array<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw StructuralError(std::string(op) + ": shapes " + numerics::shape_string(a.shape()) + " and " +
                          numerics::shape_string(b.shape()) + " differ");
  }
}

/// t * noise + (1 - t) * data; exact at both endpoints.
template <class T>
Array<T> interpolate(const Array<T>& data, const Array<T>& noise, double t) {
  require_same_shape(data, noise, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate: t must lie in [0,1]");
  Array<T> out(data.shape());
  const T tt = static_cast<T>(t), st = static_cast<T>(1.0 - t);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = tt * noise[i] + st * data[i];
  return out;
}

/// interpolate with one flow time per leading-axis row.
template <class T>
Array<T> interpolate_rows(const Array<T>& data, const Array<T>& noise, const std::vector<double>& t) {
  require_same_shape(data, noise, "interpolate_rows");
  if (static_cast<int>(t.size()) != data.dim(0)) {
    throw StructuralError("interpolate_rows: " + std::to_string(t.size()) + " flow times for " +
                          std::to_string(data.dim(0)) + " rows");
  }
  Array<T> out(data.shape());
  const std::size_t row = data.size() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (!(t[b] >= 0.0 && t[b] <= 1.0)) throw ConfigError("interpolate_rows: t must lie in [0,1]");
    const T tt = static_cast<T>(t[b]), st = static_cast<T>(1.0 - t[b]);
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) out[i] = tt * noise[i] + st * data[i];
  }
  return out;
}

/// noise - data, the constant velocity of the straight path.
template <class T>
Array<T> target_velocity(const Array<T>& data, const Array<T>& noise) {
  require_same_shape(data, noise, "target_velocity");
  Array<T> out(data.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = noise[i] - data[i];
  return out;
}

template <class T>
Array<T> normal_like(const Shape& shape, Rng& rng) {
  Array<T> out(shape);
  for (auto& v : out.vec()) v = static_cast<T>(rng.normal());
  return out;
}

/// One training sample of the joint path. Latent arrays are indexed by view.
template <class T>
struct JointPathSample {
  Array<T> a;
  std::vector<Array<T>> z;
  Array<T> eps_a;
  std::vector<Array<T>> eps_z;
  double t = 0;
  Array<T> x_a;
  std::vector<Array<T>> x_z;
  Array<T> u_a;
  std::vector<Array<T>> u_z;
};

/// Draws noise for every stream and builds interpolants and targets at a
/// single shared flow time.
template <class T>
JointPathSample<T> make_path_sample(Array<T> a, std::vector<Array<T>> z, double t, Rng& rng) {
  JointPathSample<T> s;
  s.t = t;
  s.eps_a = normal_like<T>(a.shape(), rng);
  for (const auto& zi : z) s.eps_z.push_back(normal_like<T>(zi.shape(), rng));
  s.x_a = interpolate(a, s.eps_a, t);
  s.u_a = target_velocity(a, s.eps_a);
  for (std::size_t i = 0; i < z.size(); ++i) {
    s.x_z.push_back(interpolate(z[i], s.eps_z[i], t));
    s.u_z.push_back(target_velocity(z[i], s.eps_z[i]));
  }
  s.a = std::move(a);
  s.z = std::move(z);
  return s;
}

enum class Metric { L1, L2 };

inline const char* metric_name(Metric m) { return m == Metric::L1 ? "L1" : "L2"; }

inline Metric parse_metric(const std::string& s) {
  if (s == "L1" || s == "l1") return Metric::L1;
  if (s == "L2" || s == "l2") return Metric::L2;
  throw ConfigError("unknown loss metric '" + s + "' (expected L1 or L2)");
}

struct LossWeights {
  double lambda_a = 1.0;
  std::array<double, kViewCount> lambda_z{0.1, 0.1, 0.1};  // r, w1, w2
  Metric action_metric = Metric::L1;
  Metric latent_metric = Metric::L1;

  void validate() const {
    if (!(lambda_a > 0)) throw ConfigError("loss weights: lambda_a must be positive");
    for (double l : lambda_z)
      if (l < 0) throw ConfigError("loss weights: latent weights must be nonnegative");
  }
};

template <class T>
struct LossTerms {
  Var<T> total;
  Var<T> action;
  std::vector<Var<T>> latent;  // per view, unweighted
};

template <class T>
Var<T> regression(const Var<T>& pred, const Var<T>& target, Metric m) {
  if (pred.shape() != target.shape()) {
    throw StructuralError("joint_cfm_loss: prediction " + numerics::shape_string(pred.shape()) +
                          " does not match target " + numerics::shape_string(target.shape()));
  }
  auto diff = numerics::sub(pred, target);
  return numerics::mean_all(m == Metric::L1 ? numerics::abs(diff) : numerics::square(diff));
}

/// lambda_a * mean|v_a - u_a| + sum_i lambda_i * mean|v_z,i - u_z,i|
/// (squared differences under L2). An empty latent list is the action-only
/// objective.
template <class T>
LossTerms<T> joint_cfm_loss(const Var<T>& pred_a, const std::vector<Var<T>>& pred_z, const Var<T>& u_a,
                            const std::vector<Var<T>>& u_z, const LossWeights& w) {
  w.validate();
  if (pred_z.size() != u_z.size()) throw StructuralError("joint_cfm_loss: latent stream count mismatch");
  LossTerms<T> terms;
  terms.action = regression(pred_a, u_a, w.action_metric);
  terms.total = numerics::scale(terms.action, static_cast<T>(w.lambda_a));
  for (std::size_t i = 0; i < pred_z.size(); ++i) {
    auto li = regression(pred_z[i], u_z[i], w.latent_metric);
    terms.latent.push_back(li);
    terms.total = numerics::add(terms.total, numerics::scale(li, static_cast<T>(w.lambda_z[i])));
  }
  return terms;
}

/// Action stream plus latent streams, integrated together.
template <class T>
struct JointState {
  Array<T> a;
  std::vector<Array<T>> z;
};

template <class T>
using VelocityFn = std::function<JointState<T>(const JointState<T>&, double)>;

/// Explicit Euler from t = 1 (noise) to t = 0 (data) with dt = -1/steps.
template <class T>
JointState<T> euler_sample(const VelocityFn<T>& velocity, JointState<T> state, int steps) {
  if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
  const double dt = 1.0 / steps;
  auto advance = [&](Array<T>& x, const Array<T>& v, int step) {
    require_same_shape(x, v, "euler_sample");
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!std::isfinite(static_cast<double>(v[i]))) {
        throw NumericalError("euler_sample: non-finite velocity at step " + std::to_string(step));
      }
      x[i] -= static_cast<T>(dt) * v[i];
    }
  };
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / steps;
    const JointState<T> v = velocity(state, t);
    advance(state.a, v.a, k);
    if (v.z.size() != state.z.size()) throw StructuralError("euler_sample: latent stream count mismatch");
    for (std::size_t i = 0; i < state.z.size(); ++i) advance(state.z[i], v.z[i], k);
  }
  return state;
}

}  // namespace owm::flow
