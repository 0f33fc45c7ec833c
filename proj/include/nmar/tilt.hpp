#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace nmar {

/// Position of y on a sorted node set: value = (1 - lambda) v[k] + lambda v[k+1].
/// lambda == 0 exactly on a node and beyond either end (constant extrapolation).
struct GridLocation {
  std::size_t k = 0;
  double lambda = 0.0;
};

inline GridLocation locate(std::span<const double> nodes, double y) {
  if (nodes.size() < 2 || y <= nodes.front()) return {0, 0.0};
  if (y >= nodes.back()) return {nodes.size() - 1, 0.0};
  const auto it = std::upper_bound(nodes.begin(), nodes.end(), y);
  const auto k = static_cast<std::size_t>(it - nodes.begin()) - 1;
  return {k, (y - nodes[k]) / (nodes[k + 1] - nodes[k])};
}

inline double interpolate(std::span<const double> values, const GridLocation& loc) {
  if (loc.lambda == 0.0) return values[loc.k];
  return (1.0 - loc.lambda) * values[loc.k] + loc.lambda * values[loc.k + 1];
}

/// Nonparametric outcome tilt g(y) of the response model, stored at a sorted
/// set of evaluation points. Values are centred; `level` carries the constant
/// so that g(y) = level + stored(y).
struct TiltFunction {
  std::vector<double> eval_points;
  std::vector<double> g_values;
  Eigen::MatrixXd grad_values;  // eval_points.size() x p, d g(y) / d phi
  double h = 0.0;
  double level = 0.0;

  std::size_t size() const { return eval_points.size(); }

  static TiltFunction constant(std::vector<double> points, double c, Eigen::Index p, double h) {
    TiltFunction g;
    g.g_values.assign(points.size(), 0.0);
    g.grad_values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), p);
    g.eval_points = std::move(points);
    g.h = h;
    g.level = c;
    return g;
  }

  // total value at node k
  double at_node(std::size_t k) const { return level + g_values[k]; }

  std::vector<double> total_values() const {
    std::vector<double> out(g_values.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = at_node(k);
    return out;
  }
};

/// g(y): exact at evaluation points, linear between them, constant beyond
/// the outermost points.
inline double evaluate_g(const TiltFunction& g, double y) {
  return g.level + interpolate(g.g_values, locate(g.eval_points, y));
}

inline Eigen::VectorXd evaluate_grad(const TiltFunction& g, double y) {
  const auto loc = locate(g.eval_points, y);
  const auto k = static_cast<Eigen::Index>(loc.k);
  if (loc.lambda == 0.0) return g.grad_values.row(k).transpose();
  return ((1.0 - loc.lambda) * g.grad_values.row(k) + loc.lambda * g.grad_values.row(k + 1))
      .transpose();
}

}  // namespace nmar
