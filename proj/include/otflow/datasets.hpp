#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "otflow/otoracle.hpp"
#include "otflow/pointcloud.hpp"
#include "otflow/rng.hpp"

namespace otflow::data {

enum class ShapeFamily {
  kTwoMoons,
  kCircle,
  kSquare,
  kTriangle,
  kGaussian,
  kRectangle,
};

inline const char* family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kTwoMoons: return "two_moons";
    case ShapeFamily::kCircle: return "circle";
    case ShapeFamily::kSquare: return "square";
    case ShapeFamily::kTriangle: return "triangle";
    case ShapeFamily::kGaussian: return "gaussian";
    case ShapeFamily::kRectangle: return "rectangle";
  }
  return "?";
}

inline ShapeFamily family_from_name(const std::string& s) {
  if (s == "two_moons") return ShapeFamily::kTwoMoons;
  if (s == "circle") return ShapeFamily::kCircle;
  if (s == "square") return ShapeFamily::kSquare;
  if (s == "triangle") return ShapeFamily::kTriangle;
  if (s == "gaussian") return ShapeFamily::kGaussian;
  if (s == "rectangle") return ShapeFamily::kRectangle;
  throw ValidationError("unknown shape family: " + s);
}

// Generator parameters for one cloud. The planar families are 2-D; the
// gaussian family takes its dimension from the supplied parameters. An
// optional affine map is applied after generation.
struct ShapeSpec {
  ShapeFamily family = ShapeFamily::kCircle;
  int count = 2000;
  std::uint64_t seed = 0;

  double radius = 1.0;                  // circle, two_moons
  double noise = 0.0;                   // circle, two_moons
  double gap = 0.5;                     // two_moons
  double side = 1.0;                    // square, triangle
  double width = 1.0, height = 1.0;     // rectangle
  std::vector<double> center = {0.0, 0.0};
  oracle::GaussianParams gaussian;      // gaussian family only

  bool has_affine = false;
  std::vector<double> affine_linear;    // d x d row-major
  std::vector<double> affine_shift;     // d

  int dim() const {
    return family == ShapeFamily::kGaussian ? gaussian.dim() : 2;
  }

  void validate() const {
    if (count < 1) throw ValidationError("shape spec: count must be >= 1");
    switch (family) {
      case ShapeFamily::kCircle:
      case ShapeFamily::kTwoMoons:
        if (!(radius > 0.0)) throw ValidationError("shape spec: radius must be > 0");
        if (noise < 0.0) throw ValidationError("shape spec: noise must be >= 0");
        break;
      case ShapeFamily::kSquare:
      case ShapeFamily::kTriangle:
        if (!(side > 0.0)) throw ValidationError("shape spec: side must be > 0");
        break;
      case ShapeFamily::kRectangle:
        if (!(width > 0.0) || !(height > 0.0))
          throw ValidationError("shape spec: rectangle sides must be > 0");
        break;
      case ShapeFamily::kGaussian:
        gaussian.validate();
        break;
    }
    if (family != ShapeFamily::kGaussian && center.size() != 2)
      throw ValidationError("shape spec: planar families need a 2-D center");
    if (has_affine) {
      const std::size_t d = static_cast<std::size_t>(dim());
      if (affine_linear.size() != d * d || affine_shift.size() != d)
        throw ValidationError("shape spec: affine block has wrong dimensions");
    }
  }
};

inline PointCloud apply_affine(const PointCloud& cloud,
                               const std::vector<double>& linear,
                               const std::vector<double>& shift) {
  const int d = cloud.dim;
  if (linear.size() != static_cast<std::size_t>(d) * d ||
      shift.size() != static_cast<std::size_t>(d))
    throw ValidationError("apply_affine: matrix/vector dimensions do not match cloud");
  PointCloud out(cloud.size(), d);
  out.labels = cloud.labels;
  out.seed = cloud.seed;
  out.name = cloud.name;
  for (int r = 0; r < cloud.size(); ++r) {
    const double* x = cloud.point(r);
    double* y = out.point(r);
    for (int i = 0; i < d; ++i) {
      double acc = shift[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j)
        acc += linear[static_cast<std::size_t>(i) * d + j] * x[j];
      y[i] = acc;
    }
  }
  return out;
}

inline PointCloud generate(const ShapeSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  PointCloud cloud(spec.count, spec.dim());
  cloud.seed = spec.seed;
  cloud.name = family_name(spec.family);
  const double two_pi = 2.0 * 3.14159265358979323846;

  switch (spec.family) {
    case ShapeFamily::kCircle:
      for (int r = 0; r < spec.count; ++r) {
        const double a = rng.uniform(0.0, two_pi);
        const double nx = rng.gaussian(), ny = rng.gaussian();
        cloud.at(r, 0) = spec.center[0] + spec.radius * std::cos(a) + spec.noise * nx;
        cloud.at(r, 1) = spec.center[1] + spec.radius * std::sin(a) + spec.noise * ny;
      }
      break;
    case ShapeFamily::kSquare:
      for (int r = 0; r < spec.count; ++r) {
        cloud.at(r, 0) = spec.center[0] + rng.uniform(-spec.side / 2, spec.side / 2);
        cloud.at(r, 1) = spec.center[1] + rng.uniform(-spec.side / 2, spec.side / 2);
      }
      break;
    case ShapeFamily::kRectangle:
      for (int r = 0; r < spec.count; ++r) {
        cloud.at(r, 0) = spec.center[0] + rng.uniform(-spec.width / 2, spec.width / 2);
        cloud.at(r, 1) = spec.center[1] + rng.uniform(-spec.height / 2, spec.height / 2);
      }
      break;
    case ShapeFamily::kTriangle: {
      // Equilateral triangle with centroid at `center`.
      const double s = spec.side;
      const double ax = -s / 2, ay = -s * std::sqrt(3.0) / 6;
      const double bx = s / 2, by = ay;
      const double cx = 0.0, cy = s * std::sqrt(3.0) / 3;
      for (int r = 0; r < spec.count; ++r) {
        const double u = std::sqrt(rng.uniform());
        const double v = rng.uniform();
        const double w0 = 1.0 - u, w1 = u * (1.0 - v), w2 = u * v;
        cloud.at(r, 0) = spec.center[0] + w0 * ax + w1 * bx + w2 * cx;
        cloud.at(r, 1) = spec.center[1] + w0 * ay + w1 * by + w2 * cy;
      }
      break;
    }
    case ShapeFamily::kTwoMoons:
      // Two interleaved half circles of radius r, vertically separated by
      // `gap`; even points go to the upper moon, odd points to the lower one.
      for (int r = 0; r < spec.count; ++r) {
        const double a = rng.uniform(0.0, 3.14159265358979323846);
        const double nx = rng.gaussian(), ny = rng.gaussian();
        double px, py;
        if (r % 2 == 0) {
          px = spec.radius * std::cos(a);
          py = spec.radius * std::sin(a);
        } else {
          px = spec.radius * (1.0 - std::cos(a));
          py = spec.radius - spec.gap - spec.radius * std::sin(a);
        }
        cloud.at(r, 0) = spec.center[0] + px + spec.noise * nx;
        cloud.at(r, 1) = spec.center[1] + py + spec.noise * ny;
      }
      break;
    case ShapeFamily::kGaussian:
      cloud = oracle::sample_gaussian(spec.gaussian, spec.count, rng);
      cloud.seed = spec.seed;
      cloud.name = family_name(spec.family);
      break;
  }

  if (spec.has_affine)
    cloud = apply_affine(cloud, spec.affine_linear, spec.affine_shift);
  cloud.require_valid("generated cloud");
  return cloud;
}

// ---------------------------------------------------------------------------
// Synthetic rotated-embedding pairs (desk-scale alignment task)
// ---------------------------------------------------------------------------

struct RotatedPair {
  PointCloud source;
  PointCloud target;             // target[n] = R * source[n] + noise
  std::vector<int> pairing;      // ground truth: source n <-> target pairing[n]
  Eigen::MatrixXd rotation;
};

// Haar-ish random rotation with determinant +1 from the QR factorization of a
// Gaussian matrix, with a deterministic sign convention.
inline Eigen::MatrixXd random_rotation(int d, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, 0x9071);
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = rng.gaussian();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  if (q.determinant() < 0) q.col(0) = -q.col(0);
  return q;
}

// The source mixture is fixed given the dimension: component means and
// per-axis scales come from an internal seed, so two pairs built with the
// same rotation seed share the same underlying distribution.
inline RotatedPair gen_rotated_embedding_pair(int n, int d,
                                              std::uint64_t rotation_seed,
                                              double noise_std,
                                              std::uint64_t sample_seed = 0x5a17) {
  if (d < 2) throw ValidationError("rotated pair needs d >= 2");
  if (n < 1) throw ValidationError("rotated pair needs n >= 1");
  if (noise_std < 0) throw ValidationError("rotated pair needs noise >= 0");

  constexpr int kComponents = 8;
  Rng mix_rng = Rng::stream(0xd1a7, static_cast<std::uint64_t>(d));
  std::vector<double> means(static_cast<std::size_t>(kComponents) * d);
  std::vector<double> scales(static_cast<std::size_t>(kComponents) * d);
  for (int k = 0; k < kComponents; ++k) {
    for (int i = 0; i < d; ++i) {
      means[static_cast<std::size_t>(k) * d + i] = 2.0 * mix_rng.gaussian();
      scales[static_cast<std::size_t>(k) * d + i] = mix_rng.uniform(0.15, 0.65);
    }
  }

  RotatedPair pair;
  pair.rotation = random_rotation(d, rotation_seed);
  pair.source = PointCloud(n, d);
  pair.target = PointCloud(n, d);
  pair.pairing.resize(static_cast<std::size_t>(n));
  Rng rng = Rng::stream(sample_seed, rotation_seed);
  Eigen::VectorXd x(d);
  for (int r = 0; r < n; ++r) {
    const int k = static_cast<int>(rng.below(kComponents));
    for (int i = 0; i < d; ++i) {
      x[i] = means[static_cast<std::size_t>(k) * d + i] +
             scales[static_cast<std::size_t>(k) * d + i] * rng.gaussian();
    }
    Eigen::Map<Eigen::VectorXd>(pair.source.point(r), d) = x;
    Eigen::VectorXd y = pair.rotation * x;
    for (int i = 0; i < d; ++i) y[i] += noise_std * rng.gaussian();
    Eigen::Map<Eigen::VectorXd>(pair.target.point(r), d) = y;
    pair.pairing[static_cast<std::size_t>(r)] = r;
  }
  return pair;
}

// ---------------------------------------------------------------------------
// File ingestion / emission
// ---------------------------------------------------------------------------

namespace detail {

inline double parse_double(const std::string& tok, const std::string& path,
                           int line_no) {
  double v = 0.0;
  const char* begin = tok.data();
  const char* end = begin + tok.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc{} || ptr != end)
    throw IoError(path + ":" + std::to_string(line_no) + ": malformed number '" +
                  tok + "'");
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

// CSV: one point per line, comma-separated decimals, no header.
inline PointCloud load_pointcloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point cloud file: " + path);
  PointCloud cloud;
  std::string line;
  int line_no = 0;
  std::vector<double> row;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    row.clear();
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string tok =
          line.substr(start, comma == std::string::npos ? comma : comma - start);
      row.push_back(detail::parse_double(tok, path, line_no));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cloud.dim == 0) {
      cloud.dim = static_cast<int>(row.size());
    } else if (static_cast<int>(row.size()) != cloud.dim) {
      throw IoError(path + ":" + std::to_string(line_no) +
                    ": expected " + std::to_string(cloud.dim) + " fields, got " +
                    std::to_string(row.size()));
    }
    cloud.pts.insert(cloud.pts.end(), row.begin(), row.end());
  }
  if (cloud.size() == 0) throw IoError("empty point cloud file: " + path);
  cloud.require_valid("loaded cloud");
  return cloud;
}

inline void save_pointcloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write point cloud file: " + path);
  for (int r = 0; r < cloud.size(); ++r) {
    for (int i = 0; i < cloud.dim; ++i) {
      if (i) out << ',';
      out << detail::format_double(cloud.at(r, i));
    }
    out << '\n';
  }
  if (!out) throw IoError("failed while writing: " + path);
}

// word2vec/fastText text convention: a "<count> <dim>" header, then one
// "<word> <v1> ... <vdim>" row per word. Rows beyond max_words are skipped
// (file order); max_words <= 0 keeps everything.
inline PointCloud load_embeddings(const std::string& path, int max_words = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw IoError(path + ":1: missing embedding header");
  std::istringstream header(line);
  long long declared = 0;
  int dim = 0;
  if (!(header >> declared >> dim) || declared < 1 || dim < 1)
    throw IoError(path + ":1: malformed embedding header '" + line + "'");

  const int keep = max_words > 0
                       ? std::min<long long>(declared, max_words)
                       : static_cast<int>(declared);
  PointCloud cloud;
  cloud.dim = dim;
  cloud.pts.reserve(static_cast<std::size_t>(keep) * dim);
  cloud.labels.reserve(static_cast<std::size_t>(keep));
  int line_no = 1;
  while (static_cast<int>(cloud.labels.size()) < keep && std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string word;
    if (!(row >> word))
      throw IoError(path + ":" + std::to_string(line_no) + ": missing word");
    std::vector<double> vec;
    std::string tok;
    while (row >> tok) vec.push_back(detail::parse_double(tok, path, line_no));
    if (static_cast<int>(vec.size()) != dim)
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                    std::to_string(dim) + " values, got " +
                    std::to_string(vec.size()));
    cloud.labels.push_back(word);
    cloud.pts.insert(cloud.pts.end(), vec.begin(), vec.end());
  }
  if (static_cast<int>(cloud.labels.size()) < keep)
    throw IoError(path + ": fewer rows than requested (" +
                  std::to_string(cloud.labels.size()) + " < " +
                  std::to_string(keep) + ")");
  cloud.require_valid("loaded embeddings");
  return cloud;
}

}  // namespace otflow::data
