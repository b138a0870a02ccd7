#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "owm/numerics/ops.hpp"

namespace owm::numerics {

/// A scalar-valued function written in the op vocabulary. It receives one Var
/// per input array and must return a single-element Var.
template <class T>
using ScalarFn = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

template <class T>
struct ValueAndGradients {
  T value{};
  std::vector<Array<T>> gradients;  // one per input; zeros for frozen inputs
};

template <class T>
ValueAndGradients<T> forward_backward(const ScalarFn<T>& f, std::span<const Array<T>> inputs,
                                      const std::vector<bool>& trainable = {}) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  vars.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.push_back(tape.leaf(inputs[i], trainable.empty() || trainable[i]));
  }
  const Var<T> out = f(tape, vars);
  tape.backward(out);
  ValueAndGradients<T> r;
  r.value = out.value()[0];
  for (const auto& v : vars) r.gradients.push_back(tape.grad(v));
  return r;
}

/// Plain forward evaluation on a gradient-free tape.
template <class T>
T evaluate(const ScalarFn<T>& f, std::span<const Array<T>> inputs) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& a : inputs) vars.push_back(tape.constant(a));
  const Var<T> out = f(tape, vars);
  if (out.size() != 1) throw StructuralError("evaluate: function is not scalar-valued");
  return out.value()[0];
}

namespace detail {

inline double checked_eval(const ScalarFn<double>& f, std::span<const Array<double>> inputs,
                           std::size_t input, std::size_t coord) {
  const double v = evaluate(f, inputs);
  if (!std::isfinite(v)) {
    throw NumericalError("finite difference: non-finite value probing input " + std::to_string(input) +
                         " coordinate " + std::to_string(coord));
  }
  return v;
}

}  // namespace detail

/// Central differences in double precision over every coordinate.
inline std::vector<Array<double>> finite_difference_gradient(const ScalarFn<double>& f,
                                                             std::vector<Array<double>> inputs,
                                                             double step) {
  if (!(step > 0)) throw ConfigError("finite_difference_gradient: step must be positive");
  std::vector<Array<double>> grads;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Array<double> g(inputs[i].shape(), 0.0);
    for (std::size_t c = 0; c < inputs[i].size(); ++c) {
      const double x0 = inputs[i][c];
      inputs[i][c] = x0 + step;
      const double fp = detail::checked_eval(f, inputs, i, c);
      inputs[i][c] = x0 - step;
      const double fm = detail::checked_eval(f, inputs, i, c);
      inputs[i][c] = x0;
      g[c] = (fp - fm) / (2 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

struct GradReport {
  std::string op_name;
  double max_relative_error = 0;
  int probe_count = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double kink_margin = 1e-3;     // probes closer than this to a tie or |x|=0 are rejected
  double jitter = 1e-2;          // absolute perturbation that generates probe points
  double denominator_floor = 1e-3;
  int max_attempts_per_probe = 64;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients with central differences at `probes`
/// jittered points around `inputs`. Each probe checks one random direction
/// through all inputs plus one random coordinate of every input.
inline GradReport check_gradients(const std::string& name, const ScalarFn<double>& f,
                                  const std::vector<Array<double>>& inputs, double tolerance, int probes,
                                  std::uint64_t seed, const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  GradReport report{name, 0.0, 0, false};
  for (int p = 0; p < probes; ++p) {
    std::vector<Array<double>> point;
    ValueAndGradients<double> vg;
    bool accepted = false;
    for (int attempt = 0; attempt < opt.max_attempts_per_probe && !accepted; ++attempt) {
      point = inputs;
      for (auto& a : point)
        for (auto& v : a.vec()) v += opt.jitter * normal(rng);
      Tape<double> tape;
      std::vector<Var<double>> vars;
      for (const auto& a : point) vars.push_back(tape.leaf(a, true));
      const Var<double> out = f(tape, vars);
      if (tape.kink_margin() < opt.kink_margin) continue;
      tape.backward(out);
      vg.value = out.value()[0];
      vg.gradients.clear();
      for (const auto& v : vars) vg.gradients.push_back(tape.grad(v));
      accepted = true;
    }
    if (!accepted) {
      throw NumericalError("check_gradients(" + name + "): no probe point away from non-smooth loci");
    }

    // Directional derivative through every coordinate at once.
    std::vector<Array<double>> dir;
    double analytic = 0;
    for (std::size_t i = 0; i < point.size(); ++i) {
      Array<double> d(point[i].shape(), 0.0);
      for (std::size_t c = 0; c < d.size(); ++c) {
        d[c] = normal(rng);
        analytic += d[c] * vg.gradients[i][c];
      }
      dir.push_back(std::move(d));
    }
    auto shifted = [&](double s) {
      std::vector<Array<double>> q = point;
      for (std::size_t i = 0; i < q.size(); ++i)
        for (std::size_t c = 0; c < q[i].size(); ++c) q[i][c] += s * dir[i][c];
      return detail::checked_eval(f, q, 0, 0);
    };
    const double numeric = (shifted(opt.step) - shifted(-opt.step)) / (2 * opt.step);
    report.max_relative_error =
        std::max(report.max_relative_error, relative_error(analytic, numeric, opt.denominator_floor));

    // One coordinate per input.
    for (std::size_t i = 0; i < point.size(); ++i) {
      std::uniform_int_distribution<std::size_t> pick(0, point[i].size() - 1);
      const std::size_t c = pick(rng);
      std::vector<Array<double>> q = point;
      const double x0 = q[i][c];
      q[i][c] = x0 + opt.step;
      const double fp = detail::checked_eval(f, q, i, c);
      q[i][c] = x0 - opt.step;
      const double fm = detail::checked_eval(f, q, i, c);
      const double num = (fp - fm) / (2 * opt.step);
      report.max_relative_error =
          std::max(report.max_relative_error, relative_error(vg.gradients[i][c], num, opt.denominator_floor));
    }
    ++report.probe_count;
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace owm::numerics
