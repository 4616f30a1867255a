#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "otflow/errors.hpp"
#include "otflow/param_store.hpp"
#include "otflow/tensor.hpp"
#include "otflow/threading.hpp"

namespace otflow::diff {

// Handle into a Tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over dense double arrays, rebuilt per mini-batch
// (define-by-run). Nodes are appended in evaluation order, which is a
// topological order by construction; backward() replays each node's
// vector-Jacobian product exactly once in reverse.
//
// Every op validates shapes and fails fast on non-finite outputs, naming the
// op that produced them.
class Tape {
 public:
  explicit Tape(ParamStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Diagnostic prefix for error messages, e.g. the current flow unit.
  void set_context(std::string ctx) { context_ = std::move(ctx); }
  const std::string& context() const { return context_; }

  // ---- leaves -----------------------------------------------------------

  // Constant: no gradient tracked.
  Var value(Tensor t) { return emit_leaf(std::move(t), "value", false, -1); }

  // Tracked non-parameter leaf (for gradients w.r.t. data points).
  Var input(Tensor t) { return emit_leaf(std::move(t), "input", true, -1); }

  // Tracked leaf bound to a ParamStore entry; backward() writes the entry's
  // gradient slot. Registering the same parameter twice returns the same Var.
  Var param(int param_id) {
    if (!params_) throw ValidationError("tape has no bound ParamStore");
    auto it = param_vars_.find(param_id);
    if (it != param_vars_.end()) return it->second;
    Var v = emit_leaf(params_->at(param_id).value, "param", true, param_id);
    param_vars_.emplace(param_id, v);
    return v;
  }

  // ---- elementwise ------------------------------------------------------

  Var tanh(Var x) {
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = std::tanh(xt.v[i]);
    Var y = emit(std::move(out), "tanh", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, yi = y.idx](Tape& t, const std::vector<double>& g) {
        const auto& yv = t.nodes_[yi].t.v;
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
      });
    }
    return y;
  }

  Var exp(Var x) {
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = std::exp(xt.v[i]);
    Var y = emit(std::move(out), "exp", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, yi = y.idx](Tape& t, const std::vector<double>& g) {
        const auto& yv = t.nodes_[yi].t.v;
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
      });
    }
    return y;
  }

  Var square(Var x) {
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = xt.v[i] * xt.v[i];
    Var y = emit(std::move(out), "square", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx](Tape& t, const std::vector<double>& g) {
        const auto& xv = t.nodes_[xi].t.v;
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * g[i] * xv[i];
      });
    }
    return y;
  }

  // |x|^p for p >= 1; subgradient 0 at x = 0.
  Var abspow(Var x, double p) {
    if (p < 1.0) throw ValidationError("abspow requires p >= 1");
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i)
      out.v[i] = std::pow(std::fabs(xt.v[i]), p);
    Var y = emit(std::move(out), "abspow", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, p](Tape& t, const std::vector<double>& g) {
        const auto& xv = t.nodes_[xi].t.v;
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double a = std::fabs(xv[i]);
          if (a == 0.0) continue;
          const double d = p * std::pow(a, p - 1.0) * (xv[i] > 0 ? 1.0 : -1.0);
          gx[i] += g[i] * d;
        }
      });
    }
    return y;
  }

  Var add(Var a, Var b) { return binary(a, b, "add", BinKind::Add); }
  Var sub(Var a, Var b) { return binary(a, b, "sub", BinKind::Sub); }
  Var mul(Var a, Var b) { return binary(a, b, "mul", BinKind::Mul); }

  Var scale(Var x, double c) {
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = xt.v[i] * c;
    Var y = emit(std::move(out), "scale", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, c](Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
      });
    }
    return y;
  }

  Var add_const(Var x, double c) {
    const Tensor& xt = node(x).t;
    Tensor out(xt.shape);
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = xt.v[i] + c;
    Var y = emit(std::move(out), "add_const", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx](Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    }
    return y;
  }

  // ---- reductions -------------------------------------------------------

  Var sum(Var x) {
    const Tensor& xt = node(x).t;
    double acc = 0.0;
    for (double v : xt.v) acc += v;
    Var y = emit(Tensor::scalar(acc), "sum", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx](Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (double& gv : gx) gv += g[0];
      });
    }
    return y;
  }

  Var mean(Var x) {
    const Tensor& xt = node(x).t;
    if (xt.size() == 0) throw ValidationError("mean of empty tensor");
    double acc = 0.0;
    for (double v : xt.v) acc += v;
    const double inv = 1.0 / static_cast<double>(xt.size());
    Var y = emit(Tensor::scalar(acc * inv), "mean", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, inv](Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (double& gv : gx) gv += g[0] * inv;
      });
    }
    return y;
  }

  // [N, ...] -> [N]: sums all trailing axes per leading index.
  Var feature_sum(Var x) {
    const Tensor& xt = node(x).t;
    if (xt.shape.empty()) throw ValidationError("feature_sum needs rank >= 1");
    const int n = xt.shape[0];
    const std::size_t inner = xt.size() / static_cast<std::size_t>(n);
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      const double* src = xt.v.data() + inner * static_cast<std::size_t>(i);
      for (std::size_t k = 0; k < inner; ++k) acc += src[k];
      out.v[static_cast<std::size_t>(i)] = acc;
    }
    Var y = emit(std::move(out), "feature_sum", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, n, inner](Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (int i = 0; i < n; ++i) {
          double* dst = gx.data() + inner * static_cast<std::size_t>(i);
          for (std::size_t k = 0; k < inner; ++k) dst[k] += g[static_cast<std::size_t>(i)];
        }
      });
    }
    return y;
  }

  // out = x + s with s a scalar Var broadcast over all of x.
  Var add_scalar(Var x, Var s) {
    const Tensor& xt = node(x).t;
    const Tensor& st = node(s).t;
    if (st.size() != 1) throw ValidationError("add_scalar: s must be scalar");
    Tensor out(xt.shape);
    const double sv = st.v[0];
    for (std::size_t i = 0; i < xt.size(); ++i) out.v[i] = xt.v[i] + sv;
    Var y = emit(std::move(out), "add_scalar", needs(x) || needs(s));
    set_vjp(y, [xi = x.idx, si = s.idx](Tape& t, const std::vector<double>& g) {
      if (t.nodes_[xi].needs_grad) {
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (t.nodes_[si].needs_grad) {
        double acc = 0.0;
        for (double gv : g) acc += gv;
        t.nodes_[si].grad[0] += acc;
      }
    });
    return y;
  }

  // ---- broadcast over the last axis --------------------------------------

  Var last_axis_mul(Var x, Var s) { return last_axis(x, s, "last_axis_mul", true); }
  Var last_axis_add(Var x, Var s) { return last_axis(x, s, "last_axis_add", false); }

  // ---- matrix ops ---------------------------------------------------------

  // x [R, in] * w^T with w [out, in], plus bias b [out] broadcast per row.
  Var affine(Var x, Var w, Var b) { return affine_impl(x, w, b, "affine"); }

  // x [R, in] * w^T with w [out, in].
  Var matmul_nt(Var x, Var w) { return affine_impl(x, w, Var{}, "matmul_nt"); }

  // ---- feature-axis indexing ---------------------------------------------

  // Gathers indices along the last axis: [..., d] -> [..., k].
  Var select_last(Var x, std::vector<int> idx) {
    const Tensor& xt = node(x).t;
    if (xt.shape.empty()) throw ValidationError("select_last needs rank >= 1");
    const int d = xt.shape.back();
    for (int j : idx) {
      if (j < 0 || j >= d) throw ValidationError("select_last: index out of range");
    }
    const std::size_t k = idx.size();
    const std::size_t lead = xt.size() / static_cast<std::size_t>(d);
    Shape oshape = xt.shape;
    oshape.back() = static_cast<int>(k);
    Tensor out(oshape);
    for (std::size_t r = 0; r < lead; ++r) {
      const double* src = xt.v.data() + r * static_cast<std::size_t>(d);
      double* dst = out.v.data() + r * k;
      for (std::size_t j = 0; j < k; ++j) dst[j] = src[idx[j]];
    }
    Var y = emit(std::move(out), "select_last", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, idx = std::move(idx), d, lead, k](
                     Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (std::size_t r = 0; r < lead; ++r) {
          double* dst = gx.data() + r * static_cast<std::size_t>(d);
          const double* src = g.data() + r * k;
          for (std::size_t j = 0; j < k; ++j) dst[idx[j]] += src[j];
        }
      });
    }
    return y;
  }

  // Scatters two column groups back into a [..., d] tensor; idx_a/idx_b must
  // partition {0..d-1}. Inverse of two select_last calls.
  Var merge_last(Var a, Var b, std::vector<int> idx_a, std::vector<int> idx_b) {
    const Tensor& at = node(a).t;
    const Tensor& bt = node(b).t;
    if (at.shape.empty() || bt.shape.empty())
      throw ValidationError("merge_last needs rank >= 1");
    const int ka = at.shape.back(), kb = bt.shape.back();
    if (static_cast<int>(idx_a.size()) != ka || static_cast<int>(idx_b.size()) != kb)
      throw ValidationError("merge_last: index count mismatch");
    const int d = ka + kb;
    std::vector<char> seen(static_cast<std::size_t>(d), 0);
    for (int j : idx_a) {
      if (j < 0 || j >= d || seen[j]++) throw ValidationError("merge_last: bad index set");
    }
    for (int j : idx_b) {
      if (j < 0 || j >= d || seen[j]++) throw ValidationError("merge_last: bad index set");
    }
    const std::size_t lead = at.size() / static_cast<std::size_t>(ka);
    if (lead != bt.size() / static_cast<std::size_t>(kb))
      throw ValidationError("merge_last: leading shapes differ");
    Shape oshape = at.shape;
    oshape.back() = d;
    Tensor out(oshape);
    for (std::size_t r = 0; r < lead; ++r) {
      double* dst = out.v.data() + r * static_cast<std::size_t>(d);
      const double* sa = at.v.data() + r * static_cast<std::size_t>(ka);
      const double* sb = bt.v.data() + r * static_cast<std::size_t>(kb);
      for (int j = 0; j < ka; ++j) dst[idx_a[j]] = sa[j];
      for (int j = 0; j < kb; ++j) dst[idx_b[j]] = sb[j];
    }
    Var y = emit(std::move(out), "merge_last", needs(a) || needs(b));
    set_vjp(y, [ai = a.idx, bi = b.idx, idx_a = std::move(idx_a),
                idx_b = std::move(idx_b), d, ka, kb, lead](
                   Tape& t, const std::vector<double>& g) {
      if (t.nodes_[ai].needs_grad) {
        auto& ga = t.nodes_[ai].grad;
        for (std::size_t r = 0; r < lead; ++r) {
          const double* src = g.data() + r * static_cast<std::size_t>(d);
          double* dst = ga.data() + r * static_cast<std::size_t>(ka);
          for (int j = 0; j < ka; ++j) dst[j] += src[idx_a[j]];
        }
      }
      if (t.nodes_[bi].needs_grad) {
        auto& gb = t.nodes_[bi].grad;
        for (std::size_t r = 0; r < lead; ++r) {
          const double* src = g.data() + r * static_cast<std::size_t>(d);
          double* dst = gb.data() + r * static_cast<std::size_t>(kb);
          for (int j = 0; j < kb; ++j) dst[j] += src[idx_b[j]];
        }
      }
    });
    return y;
  }

  // Gather-by-permutation on a [N, J] matrix: column j is reordered by
  // perm[j] (out[i][j] = x[perm[j][i]][j]). The permutations are fixed data,
  // so differentiation goes through the gather, not the sort that produced it.
  Var gather_rows_per_col(Var x, std::vector<std::vector<int>> perm) {
    const Tensor& xt = node(x).t;
    if (xt.shape.size() != 2) throw ValidationError("gather_rows_per_col needs [N,J]");
    const int n = xt.shape[0], j = xt.shape[1];
    if (static_cast<int>(perm.size()) != j)
      throw ValidationError("gather_rows_per_col: permutation count mismatch");
    for (const auto& p : perm) {
      if (static_cast<int>(p.size()) != n)
        throw ValidationError("gather_rows_per_col: permutation length mismatch");
    }
    Tensor out(xt.shape);
    for (int c = 0; c < j; ++c) {
      const auto& p = perm[static_cast<std::size_t>(c)];
      for (int r = 0; r < n; ++r) {
        out.v[static_cast<std::size_t>(r) * j + c] =
            xt.v[static_cast<std::size_t>(p[r]) * j + c];
      }
    }
    Var y = emit(std::move(out), "gather_rows_per_col", needs(x));
    if (needs(x)) {
      set_vjp(y, [xi = x.idx, perm = std::move(perm), n, j](
                     Tape& t, const std::vector<double>& g) {
        auto& gx = t.nodes_[xi].grad;
        for (int c = 0; c < j; ++c) {
          const auto& p = perm[static_cast<std::size_t>(c)];
          for (int r = 0; r < n; ++r) {
            gx[static_cast<std::size_t>(p[r]) * j + c] +=
                g[static_cast<std::size_t>(r) * j + c];
          }
        }
      });
    }
    return y;
  }

  // ---- per-point matrix ops (Jacobian accumulation) ----------------------

  // out[n,i,j] = x[n,i,j] * s[n,i] with x [N,r,c], s [N,r].
  Var rowwise_mul3(Var x, Var s) {
    const Tensor& xt = node(x).t;
    const Tensor& st = node(s).t;
    if (xt.shape.size() != 3 || st.shape.size() != 2 ||
        xt.shape[0] != st.shape[0] || xt.shape[1] != st.shape[1]) {
      throw ValidationError("rowwise_mul3: shapes must be [N,r,c] and [N,r]");
    }
    const int n = xt.shape[0], r = xt.shape[1], c = xt.shape[2];
    Tensor out(xt.shape);
    for (int p = 0; p < n; ++p) {
      for (int i = 0; i < r; ++i) {
        const double sv = st.v[static_cast<std::size_t>(p) * r + i];
        const std::size_t base = (static_cast<std::size_t>(p) * r + i) * c;
        for (int q = 0; q < c; ++q) out.v[base + q] = xt.v[base + q] * sv;
      }
    }
    Var y = emit(std::move(out), "rowwise_mul3", needs(x) || needs(s));
    set_vjp(y, [xi = x.idx, si = s.idx, n, r, c](Tape& t,
                                                 const std::vector<double>& g) {
      const auto& xv = t.nodes_[xi].t.v;
      const auto& sv = t.nodes_[si].t.v;
      const bool gx_on = t.nodes_[xi].needs_grad;
      const bool gs_on = t.nodes_[si].needs_grad;
      for (int p = 0; p < n; ++p) {
        for (int i = 0; i < r; ++i) {
          const std::size_t si2 = static_cast<std::size_t>(p) * r + i;
          const std::size_t base = si2 * static_cast<std::size_t>(c);
          double acc = 0.0;
          for (int q = 0; q < c; ++q) {
            if (gx_on) t.nodes_[xi].grad[base + q] += g[base + q] * sv[si2];
            acc += g[base + q] * xv[base + q];
          }
          if (gs_on) t.nodes_[si].grad[si2] += acc;
        }
      }
    });
    return y;
  }

  // out[n,i,j] = s[n,i] * w[i,j] with s [N,r], w [r,c]: diag(s_n) * w per point.
  Var dscale_mat(Var s, Var w) {
    const Tensor& st = node(s).t;
    const Tensor& wt = node(w).t;
    if (st.shape.size() != 2 || wt.shape.size() != 2 || st.shape[1] != wt.shape[0])
      throw ValidationError("dscale_mat: shapes must be [N,r] and [r,c]");
    const int n = st.shape[0], r = st.shape[1], c = wt.shape[1];
    Tensor out({n, r, c});
    for (int p = 0; p < n; ++p) {
      for (int i = 0; i < r; ++i) {
        const double sv = st.v[static_cast<std::size_t>(p) * r + i];
        const std::size_t base = (static_cast<std::size_t>(p) * r + i) * c;
        const std::size_t wbase = static_cast<std::size_t>(i) * c;
        for (int q = 0; q < c; ++q) out.v[base + q] = sv * wt.v[wbase + q];
      }
    }
    Var y = emit(std::move(out), "dscale_mat", needs(s) || needs(w));
    set_vjp(y, [si = s.idx, wi = w.idx, n, r, c](Tape& t,
                                                 const std::vector<double>& g) {
      const auto& sv = t.nodes_[si].t.v;
      const auto& wv = t.nodes_[wi].t.v;
      const bool gs_on = t.nodes_[si].needs_grad;
      const bool gw_on = t.nodes_[wi].needs_grad;
      for (int p = 0; p < n; ++p) {
        for (int i = 0; i < r; ++i) {
          const std::size_t si2 = static_cast<std::size_t>(p) * r + i;
          const std::size_t base = si2 * static_cast<std::size_t>(c);
          const std::size_t wbase = static_cast<std::size_t>(i) * c;
          double acc = 0.0;
          for (int q = 0; q < c; ++q) {
            acc += g[base + q] * wv[wbase + q];
            if (gw_on) t.nodes_[wi].grad[wbase + q] += g[base + q] * sv[si2];
          }
          if (gs_on) t.nodes_[si].grad[si2] += acc;
        }
      }
    });
    return y;
  }

  // out[n] = w * x[n] with w [r2,r1] shared and x [N,r1,c] per point.
  Var bmm_left(Var w, Var x) {
    const Tensor& wt = node(w).t;
    const Tensor& xt = node(x).t;
    if (wt.shape.size() != 2 || xt.shape.size() != 3 || wt.shape[1] != xt.shape[1])
      throw ValidationError("bmm_left: shapes must be [r2,r1] and [N,r1,c]");
    const int n = xt.shape[0], r1 = xt.shape[1], c = xt.shape[2], r2 = wt.shape[0];
    Tensor out({n, r2, c});
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t p) {
      const double* xp = xt.v.data() + p * static_cast<std::size_t>(r1) * c;
      double* op = out.v.data() + p * static_cast<std::size_t>(r2) * c;
      for (int i = 0; i < r2; ++i) {
        const double* wrow = wt.v.data() + static_cast<std::size_t>(i) * r1;
        for (int q = 0; q < c; ++q) {
          double acc = 0.0;
          for (int k = 0; k < r1; ++k) acc += wrow[k] * xp[static_cast<std::size_t>(k) * c + q];
          op[static_cast<std::size_t>(i) * c + q] = acc;
        }
      }
    });
    Var y = emit(std::move(out), "bmm_left", needs(w) || needs(x));
    set_vjp(y, [wi = w.idx, xi = x.idx, n, r1, c, r2](
                   Tape& t, const std::vector<double>& g) {
      const auto& wv = t.nodes_[wi].t.v;
      const auto& xv = t.nodes_[xi].t.v;
      const bool gw_on = t.nodes_[wi].needs_grad;
      const bool gx_on = t.nodes_[xi].needs_grad;
      for (int p = 0; p < n; ++p) {
        const double* gp = g.data() + static_cast<std::size_t>(p) * r2 * c;
        const double* xp = xv.data() + static_cast<std::size_t>(p) * r1 * c;
        if (gw_on) {
          auto& gw = t.nodes_[wi].grad;
          for (int i = 0; i < r2; ++i)
            for (int k = 0; k < r1; ++k) {
              double acc = 0.0;
              for (int q = 0; q < c; ++q)
                acc += gp[static_cast<std::size_t>(i) * c + q] * xp[static_cast<std::size_t>(k) * c + q];
              gw[static_cast<std::size_t>(i) * r1 + k] += acc;
            }
        }
        if (gx_on) {
          auto& gx = t.nodes_[xi].grad;
          double* gxp = gx.data() + static_cast<std::size_t>(p) * r1 * c;
          for (int k = 0; k < r1; ++k)
            for (int q = 0; q < c; ++q) {
              double acc = 0.0;
              for (int i = 0; i < r2; ++i)
                acc += wv[static_cast<std::size_t>(i) * r1 + k] * gp[static_cast<std::size_t>(i) * c + q];
              gxp[static_cast<std::size_t>(k) * c + q] += acc;
            }
        }
      }
    });
    return y;
  }

  // Escape hatch for custom nodes; unit tests use it to inject faulty
  // gradients into finite_diff_check.
  Var custom(Tensor out, const char* op, bool needs_grad,
             std::function<void(Tape&, const std::vector<double>&)> vjp) {
    Var y = emit(std::move(out), op, needs_grad);
    if (vjp) set_vjp(y, std::move(vjp));
    return y;
  }

  // ---- access -------------------------------------------------------------

  const Tensor& val(Var v) const { return node(v).t; }
  double scalar_val(Var v) const {
    const Tensor& t = node(v).t;
    if (t.size() != 1) throw ValidationError("scalar_val on non-scalar");
    return t.v[0];
  }
  const std::vector<double>& grad(Var v) const { return node(v).grad; }
  std::size_t node_count() const { return nodes_.size(); }

  void zero_grads() {
    for (auto& n : nodes_) n.grad.assign(n.t.size(), 0.0);
  }

  // Reverse sweep from a scalar root. Visits each node exactly once, in
  // reverse construction order, then writes parameter gradients back into the
  // bound ParamStore (overwriting previous contents of the touched entries).
  void backward(Var root) {
    if (!root.valid() || root.idx >= static_cast<int>(nodes_.size()))
      throw ValidationError("backward: root is not on this tape");
    if (nodes_[root.idx].t.size() != 1)
      throw ValidationError("backward: root must be scalar");
    zero_grads();
    nodes_[root.idx].grad[0] = 1.0;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.vjp) continue;
      n.vjp(*this, n.grad);
    }
    if (params_) {
      for (const auto& [pid, var] : param_vars_) {
        params_->at(pid).grad = nodes_[var.idx].grad;
      }
    }
  }

 private:
  enum class BinKind { Add, Sub, Mul };

  struct Node {
    Tensor t;
    std::vector<double> grad;
    std::function<void(Tape&, const std::vector<double>&)> vjp;
    const char* op = "";
    bool needs_grad = false;
    int param_id = -1;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw ValidationError("invalid tape variable");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }

  bool needs(Var v) const { return node(v).needs_grad; }

  void check_finite(const Tensor& t, const char* op) const {
    if (!all_finite(t.v)) {
      std::string where = context_.empty() ? std::string(op) : context_ + ": " + op;
      throw NumericError("op '" + where + "' produced a non-finite value");
    }
  }

  Var emit(Tensor t, const char* op, bool needs_grad) {
    check_finite(t, op);
    Node n;
    n.grad.assign(t.size(), 0.0);
    n.t = std::move(t);
    n.op = op;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var emit_leaf(Tensor t, const char* op, bool needs_grad, int param_id) {
    Var v = emit(std::move(t), op, needs_grad);
    nodes_[v.idx].param_id = param_id;
    return v;
  }

  void set_vjp(Var v, std::function<void(Tape&, const std::vector<double>&)> fn) {
    nodes_[v.idx].vjp = std::move(fn);
  }

  Var binary(Var a, Var b, const char* name, BinKind kind) {
    const Tensor& at = node(a).t;
    const Tensor& bt = node(b).t;
    if (at.shape != bt.shape)
      throw ValidationError(std::string(name) + ": shape mismatch " +
                            shape_str(at.shape) + " vs " + shape_str(bt.shape));
    Tensor out(at.shape);
    switch (kind) {
      case BinKind::Add:
        for (std::size_t i = 0; i < at.size(); ++i) out.v[i] = at.v[i] + bt.v[i];
        break;
      case BinKind::Sub:
        for (std::size_t i = 0; i < at.size(); ++i) out.v[i] = at.v[i] - bt.v[i];
        break;
      case BinKind::Mul:
        for (std::size_t i = 0; i < at.size(); ++i) out.v[i] = at.v[i] * bt.v[i];
        break;
    }
    Var y = emit(std::move(out), name, needs(a) || needs(b));
    set_vjp(y, [ai = a.idx, bi = b.idx, kind](Tape& t, const std::vector<double>& g) {
      Node& an = t.nodes_[ai];
      Node& bn = t.nodes_[bi];
      switch (kind) {
        case BinKind::Add:
          if (an.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] += g[i];
          if (bn.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) bn.grad[i] += g[i];
          break;
        case BinKind::Sub:
          if (an.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] += g[i];
          if (bn.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) bn.grad[i] -= g[i];
          break;
        case BinKind::Mul:
          if (an.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] += g[i] * bn.t.v[i];
          if (bn.needs_grad)
            for (std::size_t i = 0; i < g.size(); ++i) bn.grad[i] += g[i] * an.t.v[i];
          break;
      }
    });
    return y;
  }

  Var last_axis(Var x, Var s, const char* name, bool is_mul) {
    const Tensor& xt = node(x).t;
    const Tensor& st = node(s).t;
    if (xt.shape.empty() || st.shape.size() != 1 || st.shape[0] != xt.shape.back())
      throw ValidationError(std::string(name) + ": s must be [last-axis] vector");
    const int d = xt.shape.back();
    const std::size_t lead = xt.size() / static_cast<std::size_t>(d);
    Tensor out(xt.shape);
    for (std::size_t r = 0; r < lead; ++r) {
      const double* src = xt.v.data() + r * static_cast<std::size_t>(d);
      double* dst = out.v.data() + r * static_cast<std::size_t>(d);
      if (is_mul) {
        for (int j = 0; j < d; ++j) dst[j] = src[j] * st.v[static_cast<std::size_t>(j)];
      } else {
        for (int j = 0; j < d; ++j) dst[j] = src[j] + st.v[static_cast<std::size_t>(j)];
      }
    }
    Var y = emit(std::move(out), name, needs(x) || needs(s));
    set_vjp(y, [xi = x.idx, si = s.idx, d, lead, is_mul](
                   Tape& t, const std::vector<double>& g) {
      Node& xn = t.nodes_[xi];
      Node& sn = t.nodes_[si];
      for (std::size_t r = 0; r < lead; ++r) {
        const double* gr = g.data() + r * static_cast<std::size_t>(d);
        const double* xr = xn.t.v.data() + r * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) {
          if (is_mul) {
            if (xn.needs_grad) xn.grad[r * d + j] += gr[j] * sn.t.v[static_cast<std::size_t>(j)];
            if (sn.needs_grad) sn.grad[static_cast<std::size_t>(j)] += gr[j] * xr[j];
          } else {
            if (xn.needs_grad) xn.grad[r * d + j] += gr[j];
            if (sn.needs_grad) sn.grad[static_cast<std::size_t>(j)] += gr[j];
          }
        }
      }
    });
    return y;
  }

  Var affine_impl(Var x, Var w, Var b, const char* name) {
    const Tensor& xt = node(x).t;
    const Tensor& wt = node(w).t;
    if (xt.shape.size() != 2 || wt.shape.size() != 2 || xt.shape[1] != wt.shape[1])
      throw ValidationError(std::string(name) + ": shapes must be [R,in] and [out,in]");
    const int rows = xt.shape[0], in = xt.shape[1], out_dim = wt.shape[0];
    const bool with_bias = b.valid();
    if (with_bias) {
      const Tensor& bt = node(b).t;
      if (bt.shape.size() != 1 || bt.shape[0] != out_dim)
        throw ValidationError(std::string(name) + ": bias must be [out]");
    }
    Tensor out({rows, out_dim});
    const double* bv = with_bias ? node(b).t.v.data() : nullptr;
    parallel_for(static_cast<std::size_t>(rows), [&](std::size_t r) {
      const double* xr = xt.v.data() + r * static_cast<std::size_t>(in);
      double* yr = out.v.data() + r * static_cast<std::size_t>(out_dim);
      for (int o = 0; o < out_dim; ++o) {
        const double* wrow = wt.v.data() + static_cast<std::size_t>(o) * in;
        double acc = bv ? bv[o] : 0.0;
        for (int i = 0; i < in; ++i) acc += xr[i] * wrow[i];
        yr[o] = acc;
      }
    });
    const bool ng = needs(x) || needs(w) || (with_bias && needs(b));
    Var y = emit(std::move(out), name, ng);
    set_vjp(y, [xi = x.idx, wi = w.idx, bi = with_bias ? b.idx : -1, rows, in,
                out_dim](Tape& t, const std::vector<double>& g) {
      Node& xn = t.nodes_[xi];
      Node& wn = t.nodes_[wi];
      if (xn.needs_grad) {
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::size_t>(r) * out_dim;
          double* gxr = xn.grad.data() + static_cast<std::size_t>(r) * in;
          for (int o = 0; o < out_dim; ++o) {
            const double* wrow = wn.t.v.data() + static_cast<std::size_t>(o) * in;
            const double gv = gr[o];
            for (int i = 0; i < in; ++i) gxr[i] += gv * wrow[i];
          }
        }
      }
      if (wn.needs_grad) {
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::size_t>(r) * out_dim;
          const double* xr = xn.t.v.data() + static_cast<std::size_t>(r) * in;
          for (int o = 0; o < out_dim; ++o) {
            double* gwrow = wn.grad.data() + static_cast<std::size_t>(o) * in;
            const double gv = gr[o];
            for (int i = 0; i < in; ++i) gwrow[i] += gv * xr[i];
          }
        }
      }
      if (bi >= 0 && t.nodes_[bi].needs_grad) {
        auto& gb = t.nodes_[bi].grad;
        for (int r = 0; r < rows; ++r) {
          const double* gr = g.data() + static_cast<std::size_t>(r) * out_dim;
          for (int o = 0; o < out_dim; ++o) gb[static_cast<std::size_t>(o)] += gr[o];
        }
      }
    });
    return y;
  }

  ParamStore* params_;
  std::vector<Node> nodes_;
  std::unordered_map<int, Var> param_vars_;
  std::string context_;
};

}  // namespace otflow::diff
