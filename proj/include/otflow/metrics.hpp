#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "otflow/flows.hpp"
#include "otflow/otoracle.hpp"
#include "otflow/pointcloud.hpp"

namespace otflow::metrics {

// Per-flow squared-displacement costs and their sum.
struct CostBreakdown {
  std::vector<double> per_flow;
  double total = 0.0;
};

// c_m = (1/N) sum_n ||T_{m-1}(x_n) - T_m(x_n)||_2^2 over the flow chain.
inline CostBreakdown elementary_costs(const flows::FlowModel& model,
                                      const PointCloud& x) {
  const auto inter = flows::intermediate_outputs(model, x);
  CostBreakdown out;
  out.per_flow.reserve(inter.size() - 1);
  for (std::size_t m = 0; m + 1 < inter.size(); ++m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inter[m].pts.size(); ++i) {
      const double d = inter[m].pts[i] - inter[m + 1].pts[i];
      acc += d * d;
    }
    out.per_flow.push_back(acc / x.size());
  }
  for (double c : out.per_flow) out.total += c;
  return out;
}

// MSE(a) = ||a - a_hat||^2 and MSE(S) = ||S - S_hat||_F^2 against the MLE fit
// of the samples.
inline std::pair<double, double> barycenter_mse(const PointCloud& samples,
                                                const oracle::GaussianParams& ref) {
  ref.validate();
  if (samples.dim != ref.dim())
    throw ValidationError("barycenter_mse: dimension mismatch");
  const auto fit = oracle::mle_gaussian_fit(samples);
  const double mse_mean = (ref.mean - fit.params.mean).squaredNorm();
  const double mse_cov = (ref.cov - fit.params.cov).squaredNorm();
  return {mse_mean, mse_cov};
}

namespace detail {

inline std::vector<double> unit_rows(const PointCloud& c, const char* what) {
  std::vector<double> out = c.pts;
  for (int r = 0; r < c.size(); ++r) {
    double n2 = 0.0;
    for (int i = 0; i < c.dim; ++i) n2 += c.at(r, i) * c.at(r, i);
    if (n2 <= 0.0)
      throw ValidationError(std::string(what) + ": zero-norm vector at row " +
                            std::to_string(r) + " (cosine undefined)");
    const double inv = 1.0 / std::sqrt(n2);
    for (int i = 0; i < c.dim; ++i)
      out[static_cast<std::size_t>(r) * c.dim + i] *= inv;
  }
  return out;
}

}  // namespace detail

// Percentage of transported points whose nearest target (cosine similarity)
// falls inside the K-nearest neighborhood of their true counterpart. The
// neighborhood is computed among target points only, so a transported point
// landing right on y_n counts via the self match.
inline double knn_accuracy(const PointCloud& transported,
                           const PointCloud& targets,
                           const std::vector<int>& pairing, int k) {
  if (transported.dim != targets.dim)
    throw ValidationError("knn_accuracy: dimension mismatch");
  const int n_test = transported.size();
  const int n_targets = targets.size();
  if (static_cast<int>(pairing.size()) != n_test)
    throw ValidationError("knn_accuracy: pairing size mismatch");
  if (k < 1 || k > n_targets)
    throw ValidationError("knn_accuracy: K must be in [1, N]");
  for (int j : pairing) {
    if (j < 0 || j >= n_targets)
      throw ValidationError("knn_accuracy: pairing index out of range");
  }
  const int d = targets.dim;
  const std::vector<double> tn = detail::unit_rows(transported, "transported");
  const std::vector<double> yn = detail::unit_rows(targets, "targets");

  std::vector<int> hit(static_cast<std::size_t>(n_test), 0);
  parallel_for(static_cast<std::size_t>(n_test), [&](std::size_t r) {
    const double* q = tn.data() + r * static_cast<std::size_t>(d);
    int best_j = -1;
    double best = -2.0;
    for (int j = 0; j < n_targets; ++j) {
      const double* t = yn.data() + static_cast<std::size_t>(j) * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += q[i] * t[i];
      if (dot > best) {
        best = dot;
        best_j = j;
      }
    }
    // K-nearest set of the true counterpart within the targets.
    const double* y = yn.data() +
                      static_cast<std::size_t>(pairing[r]) * d;
    std::vector<double> ysims(static_cast<std::size_t>(n_targets));
    for (int j = 0; j < n_targets; ++j) {
      const double* t = yn.data() + static_cast<std::size_t>(j) * d;
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += y[i] * t[i];
      ysims[static_cast<std::size_t>(j)] = dot;
    }
    std::vector<int> order(static_cast<std::size_t>(n_targets));
    for (int j = 0; j < n_targets; ++j) order[static_cast<std::size_t>(j)] = j;
    std::nth_element(order.begin(), order.begin() + (k - 1), order.end(),
                     [&](int a, int b) {
                       return ysims[static_cast<std::size_t>(a)] >
                              ysims[static_cast<std::size_t>(b)];
                     });
    const double kth = ysims[static_cast<std::size_t>(order[static_cast<std::size_t>(k - 1)])];
    if (ysims[static_cast<std::size_t>(best_j)] >= kth) hit[r] = 1;
  });
  int hits = 0;
  for (int h : hit) hits += h;
  return 100.0 * hits / n_test;
}

// max_n ||T^{-1}(T(x_n)) - x_n||_inf.
inline double cycle_consistency_error(const flows::FlowModel& model,
                                      const PointCloud& x) {
  const PointCloud fwd = flows::model_forward(model, x);
  const PointCloud back = flows::model_inverse(model, fwd);
  double err = 0.0;
  for (std::size_t i = 0; i < x.pts.size(); ++i)
    err = std::max(err, std::fabs(back.pts[i] - x.pts[i]));
  return err;
}

}  // namespace otflow::metrics
