#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "otflow/errors.hpp"
#include "otflow/tensor.hpp"

namespace otflow {

// N points in d dimensions with implicit uniform weights 1/N.
struct PointCloud {
  int dim = 0;
  std::vector<double> pts;            // row-major N x dim
  std::vector<std::string> labels;    // optional (word embeddings)
  std::uint64_t seed = 0;             // generation seed, informational
  std::string name;

  PointCloud() = default;
  PointCloud(int n, int d) : dim(d), pts(static_cast<std::size_t>(n) * d, 0.0) {}

  int size() const {
    return dim == 0 ? 0 : static_cast<int>(pts.size()) / dim;
  }

  double& at(int n, int i) { return pts[static_cast<std::size_t>(n) * dim + i]; }
  double at(int n, int i) const {
    return pts[static_cast<std::size_t>(n) * dim + i];
  }
  double* point(int n) { return pts.data() + static_cast<std::size_t>(n) * dim; }
  const double* point(int n) const {
    return pts.data() + static_cast<std::size_t>(n) * dim;
  }

  Tensor as_tensor() const { return Tensor({size(), dim}, pts); }

  void require_valid(const char* what = "point cloud") const {
    if (dim < 1 || size() < 1)
      throw ValidationError(std::string(what) + " must have N >= 1 and d >= 1");
    if (!all_finite(pts))
      throw ValidationError(std::string(what) + " contains non-finite coordinates");
  }
};

inline PointCloud subset(const PointCloud& cloud, const std::vector<int>& rows) {
  PointCloud out(static_cast<int>(rows.size()), cloud.dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double* src = cloud.point(rows[r]);
    for (int i = 0; i < cloud.dim; ++i)
      out.pts[r * cloud.dim + i] = src[i];
  }
  if (!cloud.labels.empty()) {
    out.labels.reserve(rows.size());
    for (int r : rows) out.labels.push_back(cloud.labels[static_cast<std::size_t>(r)]);
  }
  return out;
}

}  // namespace otflow
