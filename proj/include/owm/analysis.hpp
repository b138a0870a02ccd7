#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "owm/errors.hpp"
#include "owm/numerics/array.hpp"
#include "owm/views.hpp"

// Feature-space probes (Fisher ratio, PCA) and inference-token accounting.
namespace owm::analysis {

using numerics::Array;
using numerics::Shape;

/// Row-major (n_samples, dim) features with one integer class per row.
struct LabeledFeatures {
  Array<double> features;
  std::vector<int> labels;
};

struct ScatterDecomposition {
  double raw_trace_between = 0;  // tr(S_B) before normalisation
  double raw_trace_within = 0;   // tr(S_W) before normalisation
  double trace_between = 0;      // tr(S_B) / tr(S_W)
  double trace_within = 0;       // 1 after normalisation (0 if tr(S_W) = 0)
  double fisher_ratio = 0;
};

/// S_W = sum_c sum_{x in c} (x - mu_c)(x - mu_c)^T,
/// S_B = sum_c n_c (mu_c - mu)(mu_c - mu)^T; only the traces are needed, so
/// the matrices are never formed.
inline ScatterDecomposition fisher_ratio(const LabeledFeatures& data) {
  const auto& x = data.features;
  if (x.rank() != 2) throw InputError("fisher_ratio: features must be (n_samples, dim)");
  const std::size_t n = static_cast<std::size_t>(x.dim(0)), d = static_cast<std::size_t>(x.dim(1));
  if (data.labels.size() != n) throw InputError("fisher_ratio: one label per sample required");
  std::map<int, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < n; ++i) classes[data.labels[i]].push_back(i);
  if (classes.size() < 2) throw InputError("fisher_ratio: need at least 2 classes, got " + std::to_string(classes.size()));
  for (const auto& [c, rows] : classes) {
    if (rows.size() < 2) {
      throw InputError("fisher_ratio: class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                       " sample(s), need at least 2");
    }
  }
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x[i * d + j];
  for (auto& m : mu) m /= static_cast<double>(n);

  ScatterDecomposition out;
  for (const auto& [c, rows] : classes) {
    std::vector<double> mc(d, 0.0);
    for (auto i : rows)
      for (std::size_t j = 0; j < d; ++j) mc[j] += x[i * d + j];
    for (auto& m : mc) m /= static_cast<double>(rows.size());
    for (auto i : rows)
      for (std::size_t j = 0; j < d; ++j) out.raw_trace_within += (x[i * d + j] - mc[j]) * (x[i * d + j] - mc[j]);
    for (std::size_t j = 0; j < d; ++j) out.raw_trace_between += static_cast<double>(rows.size()) * (mc[j] - mu[j]) * (mc[j] - mu[j]);
  }
  if (out.raw_trace_within > 0) {
    out.trace_within = 1.0;
    out.trace_between = out.raw_trace_between / out.raw_trace_within;
    out.fisher_ratio = out.trace_between;
  } else if (out.raw_trace_between > 0) {
    throw InputError("fisher_ratio: within-class scatter is zero, ratio undefined");
  }
  return out;
}

struct PcaResult {
  Array<double> projected;             // (n_samples, dims)
  Array<double> components;            // (dims, dim), orthonormal rows
  std::vector<double> eigenvalues;     // descending, length dims
  int degenerate_components = 0;       // null directions returned as zeros
};

/// Centres the data, eigendecomposes the sample covariance and projects onto
/// the leading `dims` eigenvectors. Each component's largest-magnitude
/// loading is made positive. Directions with (numerically) zero variance are
/// reported as degenerate and their projections are zero.
inline PcaResult pca_project(const Array<double>& features, int dims) {
  if (features.rank() != 2) throw InputError("pca_project: features must be (n_samples, dim)");
  const int n = features.dim(0), d = features.dim(1);
  if (dims < 1 || dims > d) throw InputError("pca_project: dims must lie in [1, " + std::to_string(d) + "]");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat x = Eigen::Map<const Mat>(features.vec().data(), n, d);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / std::max(1, n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("pca_project: eigendecomposition failed");
  const Eigen::VectorXd vals = eig.eigenvalues();
  const Eigen::MatrixXd vecs = eig.eigenvectors();
  const double top = std::max(vals.maxCoeff(), 0.0);
  const double floor = std::max(top, 1.0) * 1e-12;

  PcaResult r;
  r.components = Array<double>(Shape{dims, d}, 0.0);
  r.projected = Array<double>(Shape{n, dims}, 0.0);
  for (int c = 0; c < dims; ++c) {
    const int src = d - 1 - c;  // eigenvalues ascend
    const double lambda = vals(src);
    if (!(lambda > floor)) {
      ++r.degenerate_components;
      r.eigenvalues.push_back(0.0);
      continue;
    }
    Eigen::VectorXd v = vecs.col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.eigenvalues.push_back(lambda);
    for (int j = 0; j < d; ++j) r.components[static_cast<std::size_t>(c * d + j)] = v(j);
    const Eigen::VectorXd p = x * v;
    for (int i = 0; i < n; ++i) r.projected[static_cast<std::size_t>(i * dims + c)] = p(i);
  }
  return r;
}

// ------------------------------------------------------------------ tokens

struct BudgetConfig {
  int views = kViewCount;
  int tokens_per_view = 1;  // k
  int latent_steps = 0;     // h_z
  int action_steps = 0;     // h_a

  void validate() const {
    if (views < 1 || tokens_per_view < 1 || action_steps < 1 || latent_steps < 0) {
      throw ConfigError("budget: views, tokens_per_view and action_steps must be positive, latent_steps >= 0");
    }
  }
};

/// V * k * h_z + h_a tokens per inference query.
inline long long inference_token_count(const BudgetConfig& b) {
  b.validate();
  return static_cast<long long>(b.views) * b.tokens_per_view * b.latent_steps + b.action_steps;
}

/// Default reproduction budget: V * h_z = 60 world-token slots and h_a = 30
/// action slots per query.
inline BudgetConfig reference_budget(int tokens_per_view) { return {3, tokens_per_view, 20, 30}; }

// ------------------------------------------------------------------ output

/// Plain SVG 1.1 scatter plot, one colour per label.
inline std::string scatter_svg(const Array<double>& xy, const std::vector<int>& labels, const std::string& title) {
  if (xy.rank() != 2 || xy.dim(1) < 2) throw InputError("scatter_svg: need (n, >=2) coordinates");
  const int n = xy.dim(0), d = xy.dim(1);
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (int i = 0; i < n; ++i) {
    x0 = std::min(x0, xy[static_cast<std::size_t>(i * d)]);
    x1 = std::max(x1, xy[static_cast<std::size_t>(i * d)]);
    y0 = std::min(y0, xy[static_cast<std::size_t>(i * d + 1)]);
    y1 = std::max(y1, xy[static_cast<std::size_t>(i * d + 1)]);
  }
  const double w = 400, h = 400, pad = 30;
  const double sx = x1 > x0 ? (w - 2 * pad) / (x1 - x0) : 1, sy = y1 > y0 ? (h - 2 * pad) / (y1 - y0) : 1;
  static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
                    "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"400\" height=\"400\">\n"
                    "<rect width=\"400\" height=\"400\" fill=\"white\"/>\n"
                    "<text x=\"10\" y=\"18\" font-size=\"12\">" + title + "</text>\n";
  for (int i = 0; i < n; ++i) {
    const double px = pad + (xy[static_cast<std::size_t>(i * d)] - x0) * sx;
    const double py = h - pad - (xy[static_cast<std::size_t>(i * d + 1)] - y0) * sy;
    const int lab = labels.empty() ? 0 : labels[static_cast<std::size_t>(i)];
    out += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"3\" fill=\"" +
           palette[static_cast<std::size_t>(((lab % 10) + 10) % 10)] + "\"/>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace owm::analysis
