#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "otflow/pointcloud.hpp"
#include "otflow/rng.hpp"
#include "otflow/tape.hpp"
#include "otflow/threading.hpp"

namespace otflow::swdist {

using diff::Tape;
using diff::Var;

// J unit vectors on S^{d-1} plus the order p of the distance they estimate.
struct ProjectionSet {
  int dim = 0;
  double order = 2.0;
  std::vector<double> dirs;  // J x dim, row-major, unit rows

  int count() const {
    return dim == 0 ? 0 : static_cast<int>(dirs.size()) / dim;
  }
  const double* dir(int j) const {
    return dirs.data() + static_cast<std::size_t>(j) * dim;
  }

  void validate() const {
    if (dim < 1 || count() < 1)
      throw ValidationError("projection set needs J >= 1 and d >= 1");
    if (order < 1.0) throw ValidationError("projection set needs p >= 1");
    for (int j = 0; j < count(); ++j) {
      double n2 = 0.0;
      for (int i = 0; i < dim; ++i) n2 += dir(j)[i] * dir(j)[i];
      if (std::fabs(std::sqrt(n2) - 1.0) > 1e-12)
        throw ValidationError("projection " + std::to_string(j) + " is not unit norm");
    }
  }
};

// Gaussian draws normalized to the sphere, resampling the measure-zero
// all-zeros event. Deterministic given the generator state.
inline ProjectionSet sample_projections(int count, int dim, Rng& rng,
                                        double order = 2.0) {
  if (count < 1 || dim < 1)
    throw ValidationError("sample_projections needs J >= 1 and d >= 1");
  ProjectionSet ps;
  ps.dim = dim;
  ps.order = order;
  ps.dirs.resize(static_cast<std::size_t>(count) * dim);
  for (int j = 0; j < count; ++j) {
    double* u = ps.dirs.data() + static_cast<std::size_t>(j) * dim;
    double norm = 0.0;
    do {
      norm = 0.0;
      for (int i = 0; i < dim; ++i) {
        u[i] = rng.gaussian();
        norm += u[i] * u[i];
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (int i = 0; i < dim; ++i) u[i] /= norm;
  }
  return ps;
}

// Closed-form 1D W_p between equal-size empirical samples: sort both sides
// and average |a_(i) - b_(i)|^p.
inline double wasserstein_1d_pow(std::vector<double> a, std::vector<double> b,
                                 double p) {
  if (a.size() != b.size())
    throw ValidationError("wasserstein_1d: sample counts differ");
  if (a.empty()) throw ValidationError("wasserstein_1d: empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  if (p == 2.0) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      acc += d * d;
    }
  } else {
    for (std::size_t i = 0; i < a.size(); ++i)
      acc += std::pow(std::fabs(a[i] - b[i]), p);
  }
  return acc / static_cast<double>(a.size());
}

inline double wasserstein_1d(std::vector<double> a, std::vector<double> b,
                             double p) {
  return std::pow(wasserstein_1d_pow(std::move(a), std::move(b), p), 1.0 / p);
}

namespace detail {

inline void check_pair(const PointCloud& x, const PointCloud& y,
                       const ProjectionSet& proj) {
  if (x.dim != y.dim || x.dim != proj.dim)
    throw ValidationError("sliced_wasserstein: dimension mismatch");
  if (x.size() != y.size())
    throw ValidationError(
        "sliced_wasserstein: clouds must have equal sample counts (weights 1/N)");
  if (x.size() < 1) throw ValidationError("sliced_wasserstein: empty clouds");
}

inline void project(const PointCloud& c, const double* u, std::vector<double>& out) {
  const int n = c.size();
  out.resize(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const double* p = c.point(r);
    double acc = 0.0;
    for (int i = 0; i < c.dim; ++i) acc += p[i] * u[i];
    out[static_cast<std::size_t>(r)] = acc;
  }
}

// Stable argsort by (value, index); the index tie-break pins the permutation
// used as the fixed subgradient at ties.
inline std::vector<int> stable_argsort(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return v[static_cast<std::size_t>(a)] <
                                              v[static_cast<std::size_t>(b)]; });
  return idx;
}

}  // namespace detail

// Monte Carlo estimator of SW_p^p: the p-th power form that enters the loss
// (smooth at 0). Slices are independent; per-slice terms are accumulated in
// index order regardless of thread count.
inline double sliced_wasserstein_pow(const PointCloud& x, const PointCloud& y,
                                     const ProjectionSet& proj) {
  detail::check_pair(x, y, proj);
  const int count = proj.count();
  std::vector<double> per_slice(static_cast<std::size_t>(count));
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t j) {
    std::vector<double> px, py;
    detail::project(x, proj.dir(static_cast<int>(j)), px);
    detail::project(y, proj.dir(static_cast<int>(j)), py);
    per_slice[j] = wasserstein_1d_pow(std::move(px), std::move(py), proj.order);
  });
  double acc = 0.0;
  for (double v : per_slice) acc += v;
  return acc / count;
}

// The rooted distance, used in reports.
inline double sliced_wasserstein(const PointCloud& x, const PointCloud& y,
                                 const ProjectionSet& proj) {
  return std::pow(sliced_wasserstein_pow(x, y, proj), 1.0 / proj.order);
}

// Tape version of SW_p^p(x, y) with gradients flowing into x (and through x
// into whatever produced it). y is held fixed. The sorting permutations are
// computed at forward time; differentiation passes through the gather.
inline Var sliced_wasserstein_pow_tape(Tape& tape, Var x, const PointCloud& y,
                                       const ProjectionSet& proj) {
  const Shape xshape = tape.val(x).shape;
  if (xshape.size() != 2 || xshape[1] != proj.dim || xshape[1] != y.dim)
    throw ValidationError("sliced_wasserstein: dimension mismatch");
  const int n = xshape[0];
  if (n != y.size())
    throw ValidationError(
        "sliced_wasserstein: clouds must have equal sample counts (weights 1/N)");
  const int count = proj.count();

  Tensor u({count, proj.dim}, proj.dirs);
  Var xp = tape.matmul_nt(x, tape.value(std::move(u)));  // [N, J]

  // Fixed data: per-slice sort permutations for x, sorted projections for y.
  const std::vector<double>& xpv = tape.val(xp).v;
  std::vector<std::vector<int>> perms(static_cast<std::size_t>(count));
  Tensor ys({n, count});
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t j) {
    std::vector<double> col(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r)
      col[static_cast<std::size_t>(r)] = xpv[static_cast<std::size_t>(r) * count + j];
    perms[j] = detail::stable_argsort(col);
    std::vector<double> py;
    detail::project(y, proj.dir(static_cast<int>(j)), py);
    std::sort(py.begin(), py.end());
    for (int r = 0; r < n; ++r)
      ys.v[static_cast<std::size_t>(r) * count + j] = py[static_cast<std::size_t>(r)];
  });

  Var xs = tape.gather_rows_per_col(xp, std::move(perms));
  Var d = tape.sub(xs, tape.value(std::move(ys)));
  Var dp = (proj.order == 2.0) ? tape.square(d) : tape.abspow(d, proj.order);
  return tape.mean(dp);
}

}  // namespace otflow::swdist
