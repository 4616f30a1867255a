#pragma once

#include <utility>
#include <vector>

#include "otflow/tape.hpp"

namespace otflow::diff {

// Forward-mode pair (value, directional tangent), both living on the tape so
// that anything built from them stays reverse-differentiable. This is what
// the Hutchinson ||J v||^2 estimator rides on.
struct DualVar {
  Var v;
  Var t;
};

inline DualVar d_seed(Tape& tp, Tensor x, Tensor v) {
  if (x.shape != v.shape) throw ValidationError("jvp: tangent shape mismatch");
  return DualVar{tp.input(std::move(x)), tp.value(std::move(v))};
}

inline DualVar d_affine(Tape& tp, DualVar x, Var w, Var b) {
  return DualVar{tp.affine(x.v, w, b), tp.matmul_nt(x.t, w)};
}

inline DualVar d_matmul_nt(Tape& tp, DualVar x, Var w) {
  return DualVar{tp.matmul_nt(x.v, w), tp.matmul_nt(x.t, w)};
}

inline DualVar d_tanh(Tape& tp, DualVar x) {
  Var y = tp.tanh(x.v);
  // d tanh = 1 - tanh^2
  Var dy = tp.add_const(tp.scale(tp.square(y), -1.0), 1.0);
  return DualVar{y, tp.mul(x.t, dy)};
}

inline DualVar d_exp(Tape& tp, DualVar x) {
  Var y = tp.exp(x.v);
  return DualVar{y, tp.mul(x.t, y)};
}

inline DualVar d_add(Tape& tp, DualVar a, DualVar b) {
  return DualVar{tp.add(a.v, b.v), tp.add(a.t, b.t)};
}

inline DualVar d_sub(Tape& tp, DualVar a, DualVar b) {
  return DualVar{tp.sub(a.v, b.v), tp.sub(a.t, b.t)};
}

inline DualVar d_mul(Tape& tp, DualVar a, DualVar b) {
  Var t = tp.add(tp.mul(a.t, b.v), tp.mul(a.v, b.t));
  return DualVar{tp.mul(a.v, b.v), t};
}

inline DualVar d_scale(Tape& tp, DualVar x, double c) {
  return DualVar{tp.scale(x.v, c), tp.scale(x.t, c)};
}

inline DualVar d_add_const(Tape& tp, DualVar x, double c) {
  return DualVar{tp.add_const(x.v, c), x.t};
}

inline DualVar d_select_last(Tape& tp, DualVar x, const std::vector<int>& idx) {
  return DualVar{tp.select_last(x.v, idx), tp.select_last(x.t, idx)};
}

inline DualVar d_merge_last(Tape& tp, DualVar a, DualVar b,
                            const std::vector<int>& ia,
                            const std::vector<int>& ib) {
  return DualVar{tp.merge_last(a.v, b.v, ia, ib),
                 tp.merge_last(a.t, b.t, ia, ib)};
}

inline DualVar d_last_axis_mul(Tape& tp, DualVar x, Var s) {
  return DualVar{tp.last_axis_mul(x.v, s), tp.last_axis_mul(x.t, s)};
}

inline DualVar d_last_axis_add(Tape& tp, DualVar x, Var s) {
  return DualVar{tp.last_axis_add(x.v, s), x.t};
}

// J_f(x) . v for a function written against the dual API. The result is a
// tape Var, so it can feed a loss and be differentiated in reverse.
template <class F>
Var jvp(Tape& tp, F&& f, Tensor x, Tensor v) {
  DualVar seed = d_seed(tp, std::move(x), std::move(v));
  DualVar out = f(tp, seed);
  return out.t;
}

}  // namespace otflow::diff
