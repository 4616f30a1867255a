#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "otflow/dual.hpp"
#include "otflow/param_store.hpp"
#include "otflow/pointcloud.hpp"
#include "otflow/rng.hpp"
#include "otflow/tape.hpp"

namespace otflow::flows {

using diff::DualVar;
using diff::Tape;
using diff::Var;

// Scale outputs pass through s*tanh(./s) before exponentiation so exp cannot
// blow up early in training. Applied identically in forward, inverse and
// Jacobian computations.
inline constexpr double kScaleClamp = 5.0;

inline double clamp_scale(double raw) {
  // Multiplication by the reciprocal keeps this bitwise identical to the
  // tape-op sequence (scale, tanh, scale).
  return kScaleClamp * std::tanh(raw * (1.0 / kScaleClamp));
}

// ---------------------------------------------------------------------------
// Specs and parameter handles
// ---------------------------------------------------------------------------

// Layer widths of one conditioner network, e.g. {d_id, 8, 8, d_ch}.
// Hidden layers use tanh, the output layer is linear.
struct MLPSpec {
  std::vector<int> widths;

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int linear_layers() const { return static_cast<int>(widths.size()) - 1; }

  void validate() const {
    if (widths.size() < 3)
      throw ValidationError("MLP needs at least one hidden layer");
    for (int w : widths) {
      if (w < 1) throw ValidationError("MLP widths must be >= 1");
    }
  }
};

struct MlpHandles {
  MLPSpec spec;
  std::vector<int> w;  // ParamStore ids, one per linear layer
  std::vector<int> b;
};

struct CouplingHandles {
  std::vector<int> id_idx;  // coordinates copied through
  std::vector<int> ch_idx;  // coordinates transformed
  MlpHandles offset_net;    // D
  MlpHandles scale_net;     // E
};

struct ActNormHandles {
  int log_scale = -1;
  int offset = -1;
  bool initialized = false;
};

// One flow: optional ActNorm followed by a coupling layer.
struct FlowUnit {
  bool has_actnorm = false;
  ActNormHandles actnorm;
  CouplingHandles coupling;
};

enum class MaskPattern {
  kFirstHalfId,  // unit 1 keeps the first ceil(d/2) coordinates fixed
  kFirstHalfCh,  // unit 1 transforms them instead
};

struct ModelSpec {
  int dim = 2;
  int flow_count = 4;
  std::vector<int> hidden = {8, 8};
  bool use_actnorm = false;
  MaskPattern mask_pattern = MaskPattern::kFirstHalfId;

  void validate() const {
    if (dim < 2) throw ValidationError("flow model needs dim >= 2");
    if (flow_count < 1) throw ValidationError("flow model needs >= 1 flow");
    if (hidden.empty()) throw ValidationError("flow model needs hidden widths");
    for (int h : hidden) {
      if (h < 1) throw ValidationError("hidden widths must be >= 1");
    }
  }
};

struct FlowModel {
  ModelSpec spec;
  ParamStore params;
  std::vector<FlowUnit> units;

  int dim() const { return spec.dim; }
  int flow_count() const { return static_cast<int>(units.size()); }

  bool initialized() const {
    for (const auto& u : units) {
      if (u.has_actnorm && !u.actnorm.initialized) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline MlpHandles build_mlp(ParamStore& ps, const std::string& prefix,
                            MLPSpec spec, Rng& rng) {
  spec.validate();
  MlpHandles h;
  h.spec = spec;
  const int layers = spec.linear_layers();
  for (int l = 0; l < layers; ++l) {
    const int fan_in = spec.widths[l];
    const int fan_out = spec.widths[l + 1];
    Tensor w({fan_out, fan_in});
    // Glorot-uniform hidden layers; the output layer starts at zero so every
    // coupling begins as the identity map.
    if (l + 1 < layers) {
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& x : w.v) x = rng.uniform(-a, a);
    }
    Tensor b({fan_out});
    h.w.push_back(ps.add(prefix + ".w" + std::to_string(l), std::move(w)));
    h.b.push_back(ps.add(prefix + ".b" + std::to_string(l), std::move(b)));
  }
  return h;
}

inline std::pair<std::vector<int>, std::vector<int>> half_mask(int dim,
                                                               bool first_half_id) {
  const int head = (dim + 1) / 2;
  std::vector<int> first, second;
  for (int i = 0; i < head; ++i) first.push_back(i);
  for (int i = head; i < dim; ++i) second.push_back(i);
  if (first_half_id) return {first, second};
  return {second, first};
}

// Mask vector per the coupling convention: 1 marks a changed ("ch")
// coordinate.
inline std::vector<std::uint8_t> mask_vector(const CouplingHandles& c, int dim) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(dim), 0);
  for (int i : c.ch_idx) m[static_cast<std::size_t>(i)] = 1;
  return m;
}

inline FlowModel build_flow_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  FlowModel model;
  model.spec = spec;
  Rng rng = Rng::stream(seed, 0xf10e5);
  for (int m = 0; m < spec.flow_count; ++m) {
    FlowUnit unit;
    const std::string base = "u" + std::to_string(m);
    if (spec.use_actnorm) {
      unit.has_actnorm = true;
      unit.actnorm.log_scale =
          model.params.add(base + ".an.logscale", Tensor({spec.dim}));
      unit.actnorm.offset =
          model.params.add(base + ".an.offset", Tensor({spec.dim}));
    }
    const bool first_half_id =
        (spec.mask_pattern == MaskPattern::kFirstHalfId) ? (m % 2 == 0)
                                                         : (m % 2 == 1);
    auto [id_idx, ch_idx] = half_mask(spec.dim, first_half_id);
    unit.coupling.id_idx = id_idx;
    unit.coupling.ch_idx = ch_idx;
    MLPSpec net;
    net.widths.push_back(static_cast<int>(id_idx.size()));
    for (int h : spec.hidden) net.widths.push_back(h);
    net.widths.push_back(static_cast<int>(ch_idx.size()));
    unit.coupling.offset_net = build_mlp(model.params, base + ".D", net, rng);
    unit.coupling.scale_net = build_mlp(model.params, base + ".E", net, rng);
    model.units.push_back(std::move(unit));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Plain (inference) path
// ---------------------------------------------------------------------------

namespace detail {

// Batched MLP evaluation; rows of `in` are points. Accumulation order matches
// the tape's affine op, so plain and tape forwards agree bitwise.
inline std::vector<double> mlp_eval(const ParamStore& ps, const MlpHandles& mlp,
                                    const std::vector<double>& in, int rows) {
  std::vector<double> cur = in;
  const int layers = mlp.spec.linear_layers();
  for (int l = 0; l < layers; ++l) {
    const Tensor& w = ps.at(mlp.w[l]).value;
    const Tensor& b = ps.at(mlp.b[l]).value;
    const int fan_in = w.shape[1], fan_out = w.shape[0];
    std::vector<double> next(static_cast<std::size_t>(rows) * fan_out);
    for (int r = 0; r < rows; ++r) {
      const double* x = cur.data() + static_cast<std::size_t>(r) * fan_in;
      double* y = next.data() + static_cast<std::size_t>(r) * fan_out;
      for (int o = 0; o < fan_out; ++o) {
        const double* wrow = w.v.data() + static_cast<std::size_t>(o) * fan_in;
        double acc = b.v[static_cast<std::size_t>(o)];
        for (int i = 0; i < fan_in; ++i) acc += x[i] * wrow[i];
        y[o] = acc;
      }
    }
    if (l + 1 < layers) {
      for (double& x : next) x = std::tanh(x);
    }
    cur = std::move(next);
  }
  return cur;
}

inline std::vector<double> gather_cols(const PointCloud& x,
                                       const std::vector<int>& idx) {
  const int n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n) * idx.size());
  for (int r = 0; r < n; ++r) {
    const double* src = x.point(r);
    for (std::size_t j = 0; j < idx.size(); ++j)
      out[static_cast<std::size_t>(r) * idx.size() + j] = src[idx[j]];
  }
  return out;
}

inline void check_finite_batch(const PointCloud& x, const std::string& where) {
  if (!all_finite(x.pts))
    throw NumericError(where + " produced a non-finite value");
}

}  // namespace detail

inline PointCloud coupling_forward(const ParamStore& ps,
                                   const CouplingHandles& c,
                                   const PointCloud& x,
                                   const std::string& where = "coupling") {
  const int n = x.size();
  const int d = static_cast<int>(c.id_idx.size() + c.ch_idx.size());
  if (x.dim != d) throw ValidationError(where + ": dimension mismatch");
  const auto x_id = detail::gather_cols(x, c.id_idx);
  const auto x_ch = detail::gather_cols(x, c.ch_idx);
  const auto offs = detail::mlp_eval(ps, c.offset_net, x_id, n);
  const auto raw = detail::mlp_eval(ps, c.scale_net, x_id, n);
  const std::size_t kc = c.ch_idx.size();
  PointCloud y(n, d);
  for (int r = 0; r < n; ++r) {
    const double* src = x.point(r);
    double* dst = y.point(r);
    for (std::size_t j = 0; j < c.id_idx.size(); ++j)
      dst[c.id_idx[j]] = src[c.id_idx[j]];
    for (std::size_t j = 0; j < kc; ++j) {
      const std::size_t k = static_cast<std::size_t>(r) * kc + j;
      dst[c.ch_idx[j]] = (x_ch[k] + offs[k]) * std::exp(clamp_scale(raw[k]));
    }
  }
  detail::check_finite_batch(y, where);
  return y;
}

inline PointCloud coupling_inverse(const ParamStore& ps,
                                   const CouplingHandles& c,
                                   const PointCloud& y,
                                   const std::string& where = "coupling") {
  const int n = y.size();
  const int d = static_cast<int>(c.id_idx.size() + c.ch_idx.size());
  if (y.dim != d) throw ValidationError(where + ": dimension mismatch");
  const auto y_id = detail::gather_cols(y, c.id_idx);
  const auto y_ch = detail::gather_cols(y, c.ch_idx);
  const auto offs = detail::mlp_eval(ps, c.offset_net, y_id, n);
  const auto raw = detail::mlp_eval(ps, c.scale_net, y_id, n);
  const std::size_t kc = c.ch_idx.size();
  PointCloud x(n, d);
  for (int r = 0; r < n; ++r) {
    const double* src = y.point(r);
    double* dst = x.point(r);
    for (std::size_t j = 0; j < c.id_idx.size(); ++j)
      dst[c.id_idx[j]] = src[c.id_idx[j]];
    for (std::size_t j = 0; j < kc; ++j) {
      const std::size_t k = static_cast<std::size_t>(r) * kc + j;
      dst[c.ch_idx[j]] = y_ch[k] * std::exp(-clamp_scale(raw[k])) - offs[k];
    }
  }
  detail::check_finite_batch(x, where);
  return x;
}

// Data-dependent initialization: after it, the given batch maps to zero mean
// and unit variance per dimension (variance with the 1/N convention).
inline void actnorm_init(ParamStore& ps, ActNormHandles& an,
                         const PointCloud& batch) {
  if (an.initialized) throw ValidationError("actnorm already initialized");
  const int n = batch.size();
  const int d = batch.dim;
  if (n < 2) throw ValidationError("actnorm init needs a batch of >= 2 points");
  Tensor& ls = ps.at(an.log_scale).value;
  Tensor& off = ps.at(an.offset).value;
  for (int i = 0; i < d; ++i) {
    double mean = 0.0;
    for (int r = 0; r < n; ++r) mean += batch.at(r, i);
    mean /= n;
    double var = 0.0;
    for (int r = 0; r < n; ++r) {
      const double c = batch.at(r, i) - mean;
      var += c * c;
    }
    var /= n;
    if (!(var > 0.0))
      throw ValidationError("actnorm init: zero-variance dimension " +
                            std::to_string(i));
    const double sd = std::sqrt(var);
    ls.v[static_cast<std::size_t>(i)] = -std::log(sd);
    off.v[static_cast<std::size_t>(i)] = -mean / sd;
  }
  an.initialized = true;
}

inline PointCloud actnorm_forward(const ParamStore& ps, const ActNormHandles& an,
                                  const PointCloud& x) {
  const Tensor& ls = ps.at(an.log_scale).value;
  const Tensor& off = ps.at(an.offset).value;
  PointCloud y = x;
  for (int r = 0; r < x.size(); ++r) {
    double* p = y.point(r);
    for (int i = 0; i < x.dim; ++i)
      p[i] = p[i] * std::exp(ls.v[static_cast<std::size_t>(i)]) +
             off.v[static_cast<std::size_t>(i)];
  }
  return y;
}

inline PointCloud actnorm_inverse(const ParamStore& ps, const ActNormHandles& an,
                                  const PointCloud& y) {
  const Tensor& ls = ps.at(an.log_scale).value;
  const Tensor& off = ps.at(an.offset).value;
  PointCloud x = y;
  for (int r = 0; r < y.size(); ++r) {
    double* p = x.point(r);
    for (int i = 0; i < y.dim; ++i)
      p[i] = (p[i] - off.v[static_cast<std::size_t>(i)]) *
             std::exp(-ls.v[static_cast<std::size_t>(i)]);
  }
  return x;
}

inline PointCloud unit_forward(const FlowModel& model, int m, const PointCloud& x) {
  const FlowUnit& u = model.units[static_cast<std::size_t>(m)];
  const std::string where = "unit " + std::to_string(m);
  PointCloud cur = u.has_actnorm ? actnorm_forward(model.params, u.actnorm, x) : x;
  return coupling_forward(model.params, u.coupling, cur, where);
}

inline PointCloud unit_inverse(const FlowModel& model, int m, const PointCloud& y) {
  const FlowUnit& u = model.units[static_cast<std::size_t>(m)];
  const std::string where = "unit " + std::to_string(m);
  PointCloud cur = coupling_inverse(model.params, u.coupling, y, where);
  return u.has_actnorm ? actnorm_inverse(model.params, u.actnorm, cur) : cur;
}

inline void require_initialized(const FlowModel& model) {
  if (!model.initialized())
    throw ValidationError("flow model has uninitialized ActNorm layers");
}

// All intermediate transports: entry 0 is x itself, entry m is the output of
// the first m flows, entry M equals the full forward pass.
inline std::vector<PointCloud> intermediate_outputs(const FlowModel& model,
                                                    const PointCloud& x) {
  require_initialized(model);
  if (x.dim != model.dim())
    throw ValidationError("intermediate_outputs: dimension mismatch");
  std::vector<PointCloud> out;
  out.reserve(static_cast<std::size_t>(model.flow_count()) + 1);
  out.push_back(x);
  for (int m = 0; m < model.flow_count(); ++m)
    out.push_back(unit_forward(model, m, out.back()));
  return out;
}

inline PointCloud model_forward(const FlowModel& model, const PointCloud& x) {
  require_initialized(model);
  if (x.dim != model.dim())
    throw ValidationError("model_forward: dimension mismatch");
  PointCloud cur = x;
  for (int m = 0; m < model.flow_count(); ++m) cur = unit_forward(model, m, cur);
  return cur;
}

inline PointCloud model_inverse(const FlowModel& model, const PointCloud& y) {
  require_initialized(model);
  if (y.dim != model.dim())
    throw ValidationError("model_inverse: dimension mismatch");
  PointCloud cur = y;
  for (int m = model.flow_count() - 1; m >= 0; --m)
    cur = unit_inverse(model, m, cur);
  return cur;
}

// Initializes ActNorm layers sequentially on the batch each one actually
// sees. No-op for models without ActNorm or already-initialized ones.
inline void initialize_actnorm(FlowModel& model, const PointCloud& batch) {
  PointCloud cur = batch;
  for (int m = 0; m < model.flow_count(); ++m) {
    FlowUnit& u = model.units[static_cast<std::size_t>(m)];
    if (u.has_actnorm && !u.actnorm.initialized)
      actnorm_init(model.params, u.actnorm, cur);
    cur = unit_forward(model, m, cur);
  }
}

// ---------------------------------------------------------------------------
// Tape (training) path
// ---------------------------------------------------------------------------

struct MlpTapeOut {
  Var out;
  std::vector<Var> hidden;  // tanh activations, one per hidden layer
};

inline MlpTapeOut mlp_forward_tape(Tape& tape, const MlpHandles& mlp, Var x) {
  MlpTapeOut r;
  Var cur = x;
  const int layers = mlp.spec.linear_layers();
  for (int l = 0; l < layers; ++l) {
    cur = tape.affine(cur, tape.param(mlp.w[l]), tape.param(mlp.b[l]));
    if (l + 1 < layers) {
      cur = tape.tanh(cur);
      r.hidden.push_back(cur);
    }
  }
  r.out = cur;
  return r;
}

// Input-Jacobian of the MLP as a per-point [N, out, in] stack, assembled from
// the weight matrices and tanh derivatives of an already-recorded forward
// pass.
inline Var mlp_input_jacobian_tape(Tape& tape, const MlpHandles& mlp,
                                   const MlpTapeOut& fwd) {
  const int layers = mlp.spec.linear_layers();
  Var jac;
  for (int l = 0; l + 1 < layers; ++l) {
    // d tanh = 1 - h^2 at the recorded activation.
    Var dh = tape.add_const(tape.scale(tape.square(fwd.hidden[l]), -1.0), 1.0);
    if (l == 0) {
      jac = tape.dscale_mat(dh, tape.param(mlp.w[0]));
    } else {
      jac = tape.rowwise_mul3(tape.bmm_left(tape.param(mlp.w[l]), jac), dh);
    }
  }
  return tape.bmm_left(tape.param(mlp.w[layers - 1]), jac);
}

struct CouplingTapeOut {
  Var y;
  Var frob;  // [N] squared Frobenius norms; only set when requested
};

// Forward pass of one coupling layer on the tape. When `actnorm_scale` is a
// valid Var (the per-dimension scale vector of the ActNorm applied before the
// coupling), the returned Frobenius term is the one of the whole unit.
inline CouplingTapeOut coupling_forward_tape(Tape& tape, const CouplingHandles& c,
                                             Var x, bool want_jacobian,
                                             Var actnorm_scale = Var{}) {
  CouplingTapeOut out;
  Var x_id = tape.select_last(x, c.id_idx);
  Var x_ch = tape.select_last(x, c.ch_idx);
  MlpTapeOut dnet = mlp_forward_tape(tape, c.offset_net, x_id);
  MlpTapeOut enet = mlp_forward_tape(tape, c.scale_net, x_id);
  Var tclamp = tape.tanh(tape.scale(enet.out, 1.0 / kScaleClamp));
  Var e_clamped = tape.scale(tclamp, kScaleClamp);
  Var exp_e = tape.exp(e_clamped);
  Var y_ch = tape.mul(tape.add(x_ch, dnet.out), exp_e);
  out.y = tape.merge_last(x_id, y_ch, c.id_idx, c.ch_idx);
  if (!want_jacobian) return out;

  // ||J||_F^2 per point. For the bare coupling with partition sizes
  // (d_id, d_ch):   d_id + sum_i exp(2E_i) + ||A||_F^2,
  // A = diag(exp(E)) J_D + diag((x_ch + D) exp(E)) J_E.
  // An ActNorm in front contributes its diagonal by the chain rule, which
  // turns the three terms into column-scaled versions of themselves.
  Var j_d = mlp_input_jacobian_tape(tape, c.offset_net, dnet);
  Var j_e_raw = mlp_input_jacobian_tape(tape, c.scale_net, enet);
  Var dclamp = tape.add_const(tape.scale(tape.square(tclamp), -1.0), 1.0);
  Var j_e = tape.rowwise_mul3(j_e_raw, dclamp);
  Var a = tape.add(tape.rowwise_mul3(j_d, exp_e), tape.rowwise_mul3(j_e, y_ch));
  Var exp2e = tape.square(exp_e);
  if (actnorm_scale.valid()) {
    Var e_id = tape.select_last(actnorm_scale, c.id_idx);
    Var e_ch = tape.select_last(actnorm_scale, c.ch_idx);
    Var term_id = tape.sum(tape.square(e_id));
    Var term_diag = tape.feature_sum(tape.last_axis_mul(exp2e, tape.square(e_ch)));
    Var term_a = tape.feature_sum(tape.last_axis_mul(tape.square(a), tape.square(e_id)));
    out.frob = tape.add_scalar(tape.add(term_diag, term_a), term_id);
  } else {
    Var term_diag = tape.feature_sum(exp2e);
    Var term_a = tape.feature_sum(tape.square(a));
    out.frob = tape.add_const(tape.add(term_diag, term_a),
                              static_cast<double>(c.id_idx.size()));
  }
  return out;
}

struct UnitTapeOut {
  Var y;
  Var frob;
};

inline UnitTapeOut unit_forward_tape(Tape& tape, const FlowModel& model, int m,
                                     Var x, bool want_jacobian) {
  const FlowUnit& u = model.units[static_cast<std::size_t>(m)];
  tape.set_context("unit " + std::to_string(m));
  Var cur = x;
  Var scale_vec;
  if (u.has_actnorm) {
    scale_vec = tape.exp(tape.param(u.actnorm.log_scale));
    cur = tape.last_axis_add(tape.last_axis_mul(cur, scale_vec),
                             tape.param(u.actnorm.offset));
  }
  CouplingTapeOut c =
      coupling_forward_tape(tape, u.coupling, cur, want_jacobian, scale_vec);
  tape.set_context("");
  return UnitTapeOut{c.y, c.frob};
}

struct FlowTapeEval {
  std::vector<Var> inter;  // M+1 entries, inter[0] is the input batch
  std::vector<Var> frob;   // M entries when Jacobians were requested
};

inline FlowTapeEval model_forward_tape(Tape& tape, const FlowModel& model,
                                       Var x0, bool want_jacobian) {
  require_initialized(model);
  FlowTapeEval ev;
  ev.inter.push_back(x0);
  for (int m = 0; m < model.flow_count(); ++m) {
    UnitTapeOut u = unit_forward_tape(tape, model, m, ev.inter.back(), want_jacobian);
    ev.inter.push_back(u.y);
    if (want_jacobian) ev.frob.push_back(u.frob);
  }
  return ev;
}

// Per-point ||J||_F^2 of one unit evaluated at its actual input. Thin wrapper
// over the tape path so tests and metrics share a single implementation.
inline std::vector<double> unit_jacobian_frobenius_sq(FlowModel& model, int m,
                                                      const PointCloud& x) {
  if (x.dim != model.dim())
    throw ValidationError("unit_jacobian_frobenius_sq: dimension mismatch");
  Tape tape(&model.params);
  Var xin = tape.value(x.as_tensor());
  UnitTapeOut u = unit_forward_tape(tape, model, m, xin, true);
  return tape.val(u.frob).v;
}

// ---------------------------------------------------------------------------
// Dual-number (forward-mode) path, used by the Hutchinson estimator
// ---------------------------------------------------------------------------

inline DualVar mlp_dual(Tape& tape, const MlpHandles& mlp, DualVar x) {
  DualVar cur = x;
  const int layers = mlp.spec.linear_layers();
  for (int l = 0; l < layers; ++l) {
    cur = diff::d_affine(tape, cur, tape.param(mlp.w[l]), tape.param(mlp.b[l]));
    if (l + 1 < layers) cur = diff::d_tanh(tape, cur);
  }
  return cur;
}

inline DualVar coupling_dual(Tape& tape, const CouplingHandles& c, DualVar x) {
  DualVar x_id = diff::d_select_last(tape, x, c.id_idx);
  DualVar x_ch = diff::d_select_last(tape, x, c.ch_idx);
  DualVar d = mlp_dual(tape, c.offset_net, x_id);
  DualVar e_raw = mlp_dual(tape, c.scale_net, x_id);
  DualVar e = diff::d_scale(
      tape, diff::d_tanh(tape, diff::d_scale(tape, e_raw, 1.0 / kScaleClamp)),
      kScaleClamp);
  DualVar exp_e = diff::d_exp(tape, e);
  DualVar y_ch = diff::d_mul(tape, diff::d_add(tape, x_ch, d), exp_e);
  return diff::d_merge_last(tape, x_id, y_ch, c.id_idx, c.ch_idx);
}

inline DualVar unit_dual(Tape& tape, const FlowModel& model, int m, DualVar x) {
  const FlowUnit& u = model.units[static_cast<std::size_t>(m)];
  DualVar cur = x;
  if (u.has_actnorm) {
    Var scale_vec = tape.exp(tape.param(u.actnorm.log_scale));
    cur = diff::d_last_axis_mul(tape, cur, scale_vec);
    cur = diff::d_last_axis_add(tape, cur, tape.param(u.actnorm.offset));
  }
  return coupling_dual(tape, model.units[static_cast<std::size_t>(m)].coupling, cur);
}

// Hutchinson estimate of per-point ||J||_F^2 for one unit: the mean of
// ||J v||^2 over Rademacher probes v. Stays on the tape, so it can replace
// the exact term in the loss for large d.
inline Var unit_hutchinson_frob_tape(Tape& tape, const FlowModel& model, int m,
                                     Var x, int probes, Rng& rng) {
  if (probes < 1) throw ValidationError("hutchinson needs >= 1 probe");
  const Shape xshape = tape.val(x).shape;  // copy: emitting nodes may realloc
  Var acc;
  for (int k = 0; k < probes; ++k) {
    Tensor v(xshape);
    for (double& e : v.v) e = rng.uniform() < 0.5 ? -1.0 : 1.0;
    DualVar seed{x, tape.value(std::move(v))};
    DualVar out = unit_dual(tape, model, m, seed);
    Var sq = tape.feature_sum(tape.square(out.t));
    acc = (k == 0) ? sq : tape.add(acc, sq);
  }
  return tape.scale(acc, 1.0 / probes);
}

}  // namespace otflow::flows
