#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "otflow/dual.hpp"
#include "otflow/gradcheck.hpp"
#include "otflow/rng.hpp"
#include "otflow/tape.hpp"

using otflow::ParamStore;
using otflow::Rng;
using otflow::Tensor;
using otflow::diff::Tape;
using otflow::diff::Var;

namespace {

Tensor random_tensor(otflow::Shape shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
  Tensor t(std::move(shape));
  for (double& v : t.v) v = rng.uniform(lo, hi);
  return t;
}

struct BuiltGraph {
  Var root;
  std::vector<Var> ins;
};

using Builder = std::function<BuiltGraph(Tape&, const std::vector<Tensor>&)>;

// Independent oracle for every primitive: central finite differences of the
// scalar root w.r.t. each tracked input coordinate.
double input_grad_max_rel_error(const Builder& build, std::vector<Tensor> inputs,
                                double step = 1e-5) {
  ParamStore ps;
  Tape tape(&ps);
  BuiltGraph g = build(tape, inputs);
  tape.backward(g.root);
  std::vector<std::vector<double>> analytic;
  for (Var v : g.ins) analytic.push_back(tape.grad(v));

  double max_rel = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Tensor> probe = inputs;
        probe[k].v[i] += delta;
        ParamStore ps2;
        Tape t2(&ps2);
        BuiltGraph g2 = build(t2, probe);
        return t2.scalar_val(g2.root);
      };
      const double cd = (eval(step) - eval(-step)) / (2.0 * step);
      const double an = analytic[k][i];
      const double denom = std::max({std::fabs(an), std::fabs(cd), 1e-12});
      max_rel = std::max(max_rel, std::fabs(an - cd) / denom);
    }
  }
  return max_rel;
}

// Weighs every output entry with fixed pseudo-random coefficients so the
// whole Jacobian is exercised, then reduces to a scalar root.
Var weighted_root(Tape& tape, Var out, unsigned salt) {
  const Tensor& t = tape.val(out);
  Rng rng(9000 + salt);
  Tensor w(t.shape);
  for (double& v : w.v) v = rng.uniform(-1.0, 1.0);
  return tape.sum(tape.mul(out, tape.value(std::move(w))));
}

}  // namespace

TEST_CASE("elementwise primitives match finite differences") {
  Rng rng(42);
  auto check1 = [&](const char* name, std::function<Var(Tape&, Var)> op,
                    double tol = 1e-6) {
    CAPTURE(name);
    Builder b = [&op](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      return BuiltGraph{weighted_root(t, op(t, x), 1), {x}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({3, 4}, rng)}) < tol);
  };

  check1("tanh", [](Tape& t, Var x) { return t.tanh(x); });
  check1("exp", [](Tape& t, Var x) { return t.exp(x); });
  check1("square", [](Tape& t, Var x) { return t.square(x); });
  check1("scale", [](Tape& t, Var x) { return t.scale(x, -1.7); });
  check1("add_const", [](Tape& t, Var x) { return t.add_const(x, 0.3); });
  check1("abspow15", [](Tape& t, Var x) { return t.abspow(x, 1.5); });
  check1("abspow3", [](Tape& t, Var x) { return t.abspow(x, 3.0); });
  check1("sum", [](Tape& t, Var x) { return t.sum(x); });
  check1("mean", [](Tape& t, Var x) { return t.mean(x); });
  check1("feature_sum", [](Tape& t, Var x) { return t.feature_sum(x); });
}

TEST_CASE("binary primitives match finite differences") {
  Rng rng(43);
  auto check2 = [&](const char* name,
                    std::function<Var(Tape&, Var, Var)> op) {
    CAPTURE(name);
    Builder b = [&op](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      Var y = t.input(in[1]);
      return BuiltGraph{weighted_root(t, op(t, x, y), 2), {x, y}};
    };
    REQUIRE(input_grad_max_rel_error(
                b, {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}) <
            1e-6);
  };
  check2("add", [](Tape& t, Var a, Var b) { return t.add(a, b); });
  check2("sub", [](Tape& t, Var a, Var b) { return t.sub(a, b); });
  check2("mul", [](Tape& t, Var a, Var b) { return t.mul(a, b); });
}

TEST_CASE("matrix and broadcast primitives match finite differences") {
  Rng rng(44);

  SECTION("affine") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      Var w = t.input(in[1]);
      Var bias = t.input(in[2]);
      return BuiltGraph{weighted_root(t, t.affine(x, w, bias), 3), {x, w, bias}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({4, 3}, rng),
                                         random_tensor({5, 3}, rng),
                                         random_tensor({5}, rng)}) < 1e-6);
  }

  SECTION("matmul_nt") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      Var w = t.input(in[1]);
      return BuiltGraph{weighted_root(t, t.matmul_nt(x, w), 4), {x, w}};
    };
    REQUIRE(input_grad_max_rel_error(
                b, {random_tensor({4, 3}, rng), random_tensor({2, 3}, rng)}) <
            1e-6);
  }

  SECTION("last_axis_mul / last_axis_add / add_scalar") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      Var s = t.input(in[1]);
      Var sc = t.input(in[2]);
      Var y = t.add_scalar(t.last_axis_add(t.last_axis_mul(x, s), s), sc);
      return BuiltGraph{weighted_root(t, y, 5), {x, s, sc}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({3, 2, 4}, rng),
                                         random_tensor({4}, rng),
                                         random_tensor({1}, rng)}) < 1e-6);
  }

  SECTION("select_last / merge_last") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      Var a = t.select_last(x, {0, 3, 1});
      Var c = t.select_last(x, {2, 4});
      Var y = t.merge_last(a, c, {4, 0, 2}, {1, 3});
      return BuiltGraph{weighted_root(t, y, 6), {x}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({3, 5}, rng)}) < 1e-6);
  }

  SECTION("gather_rows_per_col") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var x = t.input(in[0]);
      std::vector<std::vector<int>> perm = {{2, 0, 1, 3}, {3, 2, 1, 0}};
      Var y = t.gather_rows_per_col(x, perm);
      return BuiltGraph{weighted_root(t, y, 7), {x}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({4, 2}, rng)}) < 1e-6);
  }

  SECTION("rowwise_mul3 / dscale_mat / bmm_left") {
    Builder b = [](Tape& t, const std::vector<Tensor>& in) {
      Var s = t.input(in[0]);   // [N,r]
      Var w = t.input(in[1]);   // [r,c]
      Var w2 = t.input(in[2]);  // [r2,r]
      Var rs = t.input(in[3]);  // [N,r2]
      Var j = t.dscale_mat(s, w);
      j = t.bmm_left(w2, j);
      j = t.rowwise_mul3(j, rs);
      return BuiltGraph{weighted_root(t, j, 8), {s, w, w2, rs}};
    };
    REQUIRE(input_grad_max_rel_error(b, {random_tensor({3, 4}, rng),
                                         random_tensor({4, 2}, rng),
                                         random_tensor({5, 4}, rng),
                                         random_tensor({3, 5}, rng)}) < 1e-6);
  }
}

TEST_CASE("primitive forward values") {
  ParamStore ps;
  Tape tape(&ps);
  SECTION("tanh(0) = 0 and exp(0) = 1") {
    Var z = tape.value(Tensor({1}, {0.0}));
    CHECK(tape.val(tape.tanh(z)).v[0] == 0.0);
    CHECK(tape.val(tape.exp(z)).v[0] == 1.0);
  }
  SECTION("affine with identity weights is the identity map") {
    Var x = tape.value(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Var w = tape.value(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    Var b = tape.value(Tensor({3}));
    CHECK(tape.val(tape.affine(x, w, b)).v == std::vector<double>{1, 2, 3, 4, 5, 6});
  }
}

TEST_CASE("backward basics") {
  SECTION("root = sum(p) gives an all-ones gradient") {
    ParamStore ps;
    int pid = ps.add("p", Tensor({3}, {0.5, -1.0, 2.0}));
    Tape tape(&ps);
    tape.backward(tape.sum(tape.param(pid)));
    CHECK(ps.at(pid).grad == std::vector<double>{1.0, 1.0, 1.0});
  }
  SECTION("root = sum(square(p)) at p=(1,2) gives (2,4)") {
    ParamStore ps;
    int pid = ps.add("p", Tensor({2}, {1.0, 2.0}));
    Tape tape(&ps);
    tape.backward(tape.sum(tape.square(tape.param(pid))));
    CHECK(ps.at(pid).grad == std::vector<double>{2.0, 4.0});
  }
  SECTION("non-scalar root is rejected") {
    ParamStore ps;
    int pid = ps.add("p", Tensor({2}, {1.0, 2.0}));
    Tape tape(&ps);
    Var p = tape.param(pid);
    CHECK_THROWS_AS(tape.backward(p), otflow::ValidationError);
  }
  SECTION("root not on tape is rejected") {
    ParamStore ps;
    Tape tape(&ps);
    CHECK_THROWS_AS(tape.backward(Var{57}), otflow::ValidationError);
  }
}

TEST_CASE("backward is linear in the root") {
  Rng rng(7);
  ParamStore ps;
  int pid = ps.add("p", random_tensor({6}, rng));
  const double a = 1.7, b = -0.4;

  auto grad_of = [&](std::function<Var(Tape&, Var)> f) {
    Tape tape(&ps);
    tape.backward(f(tape, tape.param(pid)));
    return ps.at(pid).grad;
  };
  auto f = [](Tape& t, Var p) { return t.sum(t.square(p)); };
  auto g = [](Tape& t, Var p) { return t.mean(t.tanh(p)); };
  auto combo = [&](Tape& t, Var p) {
    return t.add(t.scale(f(t, p), a), t.scale(g(t, p), b));
  };

  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  const auto gc = grad_of(combo);
  for (std::size_t i = 0; i < gf.size(); ++i) {
    CHECK(gc[i] == Catch::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("replaying the same tape twice yields bitwise-identical gradients") {
  Rng rng(8);
  ParamStore ps;
  int pid = ps.add("p", random_tensor({4, 3}, rng));
  Tape tape(&ps);
  Var p = tape.param(pid);
  Var root = tape.mean(tape.square(tape.tanh(p)));
  tape.backward(root);
  const auto g1 = ps.at(pid).grad;
  tape.backward(root);
  const auto g2 = ps.at(pid).grad;
  CHECK(g1 == g2);
}

TEST_CASE("error policy") {
  SECTION("exp overflow fails fast naming the op") {
    ParamStore ps;
    Tape tape(&ps);
    Var x = tape.value(Tensor({1}, {1e4}));
    try {
      tape.exp(x);
      FAIL("expected NumericError");
    } catch (const otflow::NumericError& e) {
      CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
  }
  SECTION("context is included in the failure message") {
    ParamStore ps;
    Tape tape(&ps);
    tape.set_context("unit 3");
    Var x = tape.value(Tensor({1}, {1e4}));
    try {
      tape.exp(x);
      FAIL("expected NumericError");
    } catch (const otflow::NumericError& e) {
      CHECK(std::string(e.what()).find("unit 3") != std::string::npos);
    }
  }
  SECTION("shape mismatch is rejected") {
    ParamStore ps;
    Tape tape(&ps);
    Var a = tape.value(Tensor({2, 2}));
    Var b = tape.value(Tensor({4}));
    CHECK_THROWS_AS(tape.add(a, b), otflow::ValidationError);
  }
}

TEST_CASE("finite_diff_check") {
  SECTION("quadratic is exact up to roundoff") {
    Rng rng(11);
    ParamStore ps;
    int pid = ps.add("p", random_tensor({5}, rng));
    auto build = [&](Tape& t) { return t.sum(t.square(t.param(pid))); };
    CHECK(otflow::diff::finite_diff_check(build, ps, 1e-5) < 1e-8);
  }

  SECTION("a gradient off by a factor 2 is rejected with error close to 0.5") {
    Rng rng(12);
    ParamStore ps;
    int pid = ps.add("p", random_tensor({4}, rng, 0.5, 1.5));
    auto build = [&](Tape& t) {
      Var p = t.param(pid);
      const Tensor& pt = t.val(p);
      Tensor out(pt.shape);
      for (std::size_t i = 0; i < pt.size(); ++i) out.v[i] = pt.v[i] * pt.v[i];
      // Deliberately wrong vector-Jacobian product: 4x instead of 2x.
      Var bad = t.custom(std::move(out), "bad_square", true,
                         [pi = p.idx](Tape& tt, const std::vector<double>& g) {
                           const auto& pv = tt.val(Var{pi}).v;
                           auto& gp =
                               const_cast<std::vector<double>&>(tt.grad(Var{pi}));
                           for (std::size_t i = 0; i < g.size(); ++i)
                             gp[i] += 4.0 * g[i] * pv[i];
                         });
      return t.sum(bad);
    };
    const double err = otflow::diff::finite_diff_check(build, ps, 1e-5);
    CHECK(err > 0.4);
    CHECK(err < 0.6);
  }
}

TEST_CASE("jvp") {
  SECTION("identity function returns the tangent") {
    ParamStore ps;
    Tape tape(&ps);
    Tensor x({3}, {1.0, 2.0, 3.0});
    Tensor v({3}, {0.5, -1.0, 2.0});
    Var t = otflow::diff::jvp(
        tape, [](Tape&, otflow::diff::DualVar d) { return d; }, x, v);
    CHECK(tape.val(t).v == v.v);
  }
  SECTION("exp at 0 with tangent 1 gives 1") {
    ParamStore ps;
    Tape tape(&ps);
    Var t = otflow::diff::jvp(
        tape,
        [](Tape& tp, otflow::diff::DualVar d) { return otflow::diff::d_exp(tp, d); },
        Tensor({1}, {0.0}), Tensor({1}, {1.0}));
    CHECK(tape.val(t).v[0] == 1.0);
  }
}
