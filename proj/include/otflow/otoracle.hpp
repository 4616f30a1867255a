#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <vector>

#include "otflow/pointcloud.hpp"
#include "otflow/rng.hpp"
#include "otflow/threading.hpp"

namespace otflow::oracle {

inline constexpr double kEigFloor = 1e-12;

// Mean vector and SPD covariance.
struct GaussianParams {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  int dim() const { return static_cast<int>(mean.size()); }

  void validate() const {
    if (mean.size() < 1 || cov.rows() != mean.size() || cov.cols() != mean.size())
      throw ValidationError("gaussian: covariance/mean size mismatch");
    const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12)
      throw ValidationError("gaussian: covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw ValidationError("gaussian: covariance is not positive definite");
  }
};

// Symmetric square root via eigendecomposition. Small negative eigenvalues
// from roundoff are clamped; anything beyond tolerance is an error.
inline Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ValidationError("spd_sqrt: matrix not square");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw ValidationError("spd_sqrt: matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-10 * scale)
      throw NumericError("spd_sqrt: negative eigenvalue beyond tolerance");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Inverse square root with a hard eigenvalue floor; failing the floor is an
// error rather than silent regularization.
inline Eigen::MatrixXd spd_inv_sqrt(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ValidationError("spd_inv_sqrt: matrix not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    if (ev[i] < kEigFloor)
      throw NumericError("spd_inv_sqrt: eigenvalue below floor");
    ev[i] = 1.0 / std::sqrt(ev[i]);
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Squared Bures-Wasserstein distance between Gaussians:
//   ||a1 - a2||^2 + tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2}).
inline double gaussian_w2_sq(const GaussianParams& g1, const GaussianParams& g2) {
  g1.validate();
  g2.validate();
  if (g1.dim() != g2.dim()) throw ValidationError("gaussian_w2: dimension mismatch");
  const Eigen::MatrixXd s2h = spd_sqrt(g2.cov);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s2h * g1.cov * s2h);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double v = (g1.mean - g2.mean).squaredNorm() + g1.cov.trace() +
                   g2.cov.trace() - 2.0 * cross;
  return std::max(v, 0.0);
}

inline double gaussian_w2(const GaussianParams& g1, const GaussianParams& g2) {
  return std::sqrt(gaussian_w2_sq(g1, g2));
}

struct AffineMap {
  Eigen::MatrixXd linear;
  Eigen::VectorXd shift;
};

// Optimal (quadratic-cost) transport map between Gaussians:
//   A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2},  b = a2 - A a1.
inline AffineMap gaussian_ot_map(const GaussianParams& g1, const GaussianParams& g2) {
  g1.validate();
  g2.validate();
  if (g1.dim() != g2.dim())
    throw ValidationError("gaussian_ot_map: dimension mismatch");
  const Eigen::MatrixXd s1h = spd_sqrt(g1.cov);
  const Eigen::MatrixXd s1ih = spd_inv_sqrt(g1.cov);
  const Eigen::MatrixXd mid = spd_sqrt(s1h * g2.cov * s1h);
  AffineMap map;
  map.linear = s1ih * mid * s1ih;
  map.shift = g2.mean - map.linear * g1.mean;
  return map;
}

// Two-measure barycenter between Gaussians at weight alpha on g1, via the
// standard covariance fixed-point iteration
//   S <- S^{-1/2} (a (S^{1/2} S1 S^{1/2})^{1/2} + (1-a)(S^{1/2} S2 S^{1/2})^{1/2})^2 S^{-1/2},
// started from the convex combination of the covariances.
inline GaussianParams gaussian_barycenter_fixedpoint(const GaussianParams& g1,
                                                     const GaussianParams& g2,
                                                     double alpha,
                                                     double tol = 1e-10,
                                                     int max_iter = 500) {
  g1.validate();
  g2.validate();
  if (g1.dim() != g2.dim())
    throw ValidationError("gaussian_barycenter: dimension mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ValidationError("gaussian_barycenter: alpha must be in [0,1]");
  if (alpha == 1.0) return g1;
  if (alpha == 0.0) return g2;

  GaussianParams out;
  out.mean = alpha * g1.mean + (1.0 - alpha) * g2.mean;
  Eigen::MatrixXd s = alpha * g1.cov + (1.0 - alpha) * g2.cov;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd sh = spd_sqrt(s);
    const Eigen::MatrixXd sih = spd_inv_sqrt(s);
    const Eigen::MatrixXd mixed = alpha * spd_sqrt(sh * g1.cov * sh) +
                                  (1.0 - alpha) * spd_sqrt(sh * g2.cov * sh);
    Eigen::MatrixXd next = sih * mixed * mixed * sih;
    next = 0.5 * (next + next.transpose());
    const double change = (next - s).norm();
    s = next;
    if (change <= tol) {
      out.cov = s;
      return out;
    }
  }
  throw NumericError("gaussian_barycenter: fixed point did not converge");
}

// One application of the fixed-point map, for post-hoc stationarity checks.
inline Eigen::MatrixXd barycenter_iteration_step(const Eigen::MatrixXd& s,
                                                 const GaussianParams& g1,
                                                 const GaussianParams& g2,
                                                 double alpha) {
  const Eigen::MatrixXd sh = spd_sqrt(s);
  const Eigen::MatrixXd sih = spd_inv_sqrt(s);
  const Eigen::MatrixXd mixed = alpha * spd_sqrt(sh * g1.cov * sh) +
                                (1.0 - alpha) * spd_sqrt(sh * g2.cov * sh);
  return sih * mixed * mixed * sih;
}

struct MleFit {
  GaussianParams params;
  bool degenerate = false;  // covariance numerically rank-deficient
};

// Sample mean and 1/N covariance.
inline MleFit mle_gaussian_fit(const PointCloud& samples) {
  samples.require_valid("mle_gaussian_fit input");
  const int n = samples.size();
  const int d = samples.dim;
  if (n < d + 1)
    throw ValidationError("mle_gaussian_fit: needs at least d+1 samples");
  MleFit fit;
  fit.params.mean = Eigen::VectorXd::Zero(d);
  for (int r = 0; r < n; ++r)
    fit.params.mean += Eigen::Map<const Eigen::VectorXd>(samples.point(r), d);
  fit.params.mean /= n;
  fit.params.cov = Eigen::MatrixXd::Zero(d, d);
  for (int r = 0; r < n; ++r) {
    const Eigen::VectorXd c =
        Eigen::Map<const Eigen::VectorXd>(samples.point(r), d) - fit.params.mean;
    fit.params.cov += c * c.transpose();
  }
  fit.params.cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.params.cov);
  fit.degenerate = es.eigenvalues().minCoeff() < kEigFloor;
  return fit;
}

inline PointCloud sample_gaussian(const GaussianParams& g, int n, Rng& rng) {
  g.validate();
  const int d = g.dim();
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(g.cov).matrixL();
  PointCloud cloud(n, d);
  Eigen::VectorXd z(d);
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < d; ++i) z[i] = rng.gaussian();
    Eigen::Map<Eigen::VectorXd>(cloud.point(r), d) = g.mean + chol * z;
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Exact discrete OT between equal-size clouds (cost ||.||_2^p)
// ---------------------------------------------------------------------------

struct Assignment {
  std::vector<int> perm;  // x index -> y index
  double cost = 0.0;      // mean cost over points

  void validate() const {
    std::vector<char> seen(perm.size(), 0);
    for (int j : perm) {
      if (j < 0 || j >= static_cast<int>(perm.size()) || seen[j]++)
        throw ValidationError("assignment is not a permutation");
    }
  }
};

namespace detail {

// Hungarian algorithm, shortest-augmenting-path form, O(n^3). cost is a dense
// row-major n x n matrix; returns row -> column.
inline std::vector<int> solve_assignment(const std::vector<double>& cost, int n) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur =
            cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> perm(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    if (p[j] > 0) perm[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  }
  return perm;
}

inline double pair_cost(const PointCloud& x, int i, const PointCloud& y, int j,
                        double p) {
  double d2 = 0.0;
  const double* a = x.point(i);
  const double* b = y.point(j);
  for (int k = 0; k < x.dim; ++k) {
    const double d = a[k] - b[k];
    d2 += d * d;
  }
  if (p == 2.0) return d2;
  return std::pow(std::sqrt(d2), p);
}

}  // namespace detail

inline Assignment exact_ot_discrete(const PointCloud& x, const PointCloud& y,
                                    double p = 2.0) {
  if (x.dim != y.dim) throw ValidationError("exact_ot_discrete: dimension mismatch");
  if (x.size() != y.size())
    throw ValidationError("exact_ot_discrete: clouds must have equal sizes");
  const int n = x.size();
  if (n > 4096)
    throw ValidationError("exact_ot_discrete: N > 4096 exceeds the cubic solver budget");
  std::vector<double> cost(static_cast<std::size_t>(n) * n);
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    for (int j = 0; j < n; ++j)
      cost[i * n + j] = detail::pair_cost(x, static_cast<int>(i), y, j, p);
  });
  Assignment a;
  a.perm = detail::solve_assignment(cost, n);
  for (int i = 0; i < n; ++i)
    a.cost += cost[static_cast<std::size_t>(i) * n + a.perm[static_cast<std::size_t>(i)]];
  a.cost /= n;
  return a;
}

}  // namespace otflow::oracle
