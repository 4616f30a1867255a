#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "otflow/flows.hpp"
#include "otflow/gradcheck.hpp"
#include "otflow/rng.hpp"

using namespace otflow;
using flows::FlowModel;
using flows::ModelSpec;

namespace {

PointCloud random_cloud(int n, int d, Rng& rng, double lo = -2.0, double hi = 2.0) {
  PointCloud c(n, d);
  for (double& v : c.pts) v = rng.uniform(lo, hi);
  return c;
}

void randomize_params(FlowModel& model, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (int p = 0; p < model.params.count(); ++p) {
    for (double& v : model.params.at(p).value.v) v = rng.uniform(lo, hi);
  }
}

void mark_actnorm_initialized(FlowModel& model) {
  for (auto& u : model.units) {
    if (u.has_actnorm) u.actnorm.initialized = true;
  }
}

double max_abs_diff(const PointCloud& a, const PointCloud& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.pts.size(); ++i)
    m = std::max(m, std::fabs(a.pts[i] - b.pts[i]));
  return m;
}

// Bias value that makes the clamped scale output equal `target`.
double inverse_clamp(double target) {
  return flows::kScaleClamp * std::atanh(target / flows::kScaleClamp);
}

// Sets the output-layer bias of a conditioner net to a constant (weights stay
// zero), making the net constant-valued.
void set_net_constant(FlowModel& model, const flows::MlpHandles& net, double c) {
  auto& bias = model.params.at(net.b.back()).value.v;
  for (double& v : bias) v = c;
}

// Numerically assembled d x d Jacobian of one unit at a single point.
double fd_jacobian_frob_sq(const FlowModel& model, int m, const PointCloud& x,
                           int row, double h = 1e-5) {
  const int d = model.dim();
  double frob = 0.0;
  for (int j = 0; j < d; ++j) {
    PointCloud xp(1, d), xm(1, d);
    for (int i = 0; i < d; ++i) {
      xp.at(0, i) = x.at(row, i);
      xm.at(0, i) = x.at(row, i);
    }
    xp.at(0, j) += h;
    xm.at(0, j) -= h;
    PointCloud fp = flows::unit_forward(model, m, xp);
    PointCloud fm = flows::unit_forward(model, m, xm);
    for (int i = 0; i < d; ++i) {
      const double der = (fp.at(0, i) - fm.at(0, i)) / (2.0 * h);
      frob += der * der;
    }
  }
  return frob;
}

}  // namespace

TEST_CASE("fresh models are the identity map") {
  ModelSpec spec;
  spec.dim = 3;
  spec.flow_count = 4;
  FlowModel model = flows::build_flow_model(spec, 17);
  Rng rng(3);
  PointCloud x = random_cloud(50, 3, rng);
  CHECK(flows::model_forward(model, x).pts == x.pts);
  auto inter = flows::intermediate_outputs(model, x);
  REQUIRE(inter.size() == 5);
  for (const auto& c : inter) CHECK(c.pts == x.pts);
}

TEST_CASE("coupling layer examples") {
  ModelSpec spec;
  spec.dim = 2;
  spec.flow_count = 1;
  FlowModel model = flows::build_flow_model(spec, 5);
  auto& cpl = model.units[0].coupling;
  REQUIRE(cpl.id_idx == std::vector<int>{0});
  REQUIRE(cpl.ch_idx == std::vector<int>{1});

  PointCloud x(1, 2);
  x.at(0, 0) = 1.0;
  x.at(0, 1) = 2.0;

  SECTION("pure offset: D=1, E=0 maps (1,2) to (1,3)") {
    set_net_constant(model, cpl.offset_net, 1.0);
    PointCloud y = flows::coupling_forward(model.params, cpl, x);
    CHECK(y.at(0, 0) == 1.0);
    CHECK(y.at(0, 1) == Catch::Approx(3.0).margin(1e-15));
    PointCloud back = flows::coupling_inverse(model.params, cpl, y);
    CHECK(back.at(0, 0) == 1.0);
    CHECK(back.at(0, 1) == Catch::Approx(2.0).margin(1e-12));
  }

  SECTION("pure scale: D=0, E=ln 2 maps (1,2) to (1,4)") {
    set_net_constant(model, cpl.scale_net, inverse_clamp(std::log(2.0)));
    PointCloud y = flows::coupling_forward(model.params, cpl, x);
    CHECK(y.at(0, 0) == 1.0);
    CHECK(y.at(0, 1) == Catch::Approx(4.0).margin(1e-12));
  }

  SECTION("dimension mismatch is rejected") {
    PointCloud bad(1, 3);
    CHECK_THROWS_AS(flows::coupling_forward(model.params, cpl, bad),
                    ValidationError);
  }
}

TEST_CASE("coupling round trip at d=8 with random parameters") {
  ModelSpec spec;
  spec.dim = 8;
  spec.flow_count = 1;
  FlowModel model = flows::build_flow_model(spec, 23);
  Rng rng(29);
  randomize_params(model, rng);
  PointCloud x = random_cloud(1000, 8, rng);
  PointCloud y = flows::coupling_forward(model.params, model.units[0].coupling, x);
  PointCloud back = flows::coupling_inverse(model.params, model.units[0].coupling, y);
  CHECK(max_abs_diff(back, x) < 1e-9);
}

TEST_CASE("actnorm") {
  SECTION("init on {0, 2} in d=1 maps the batch to {-1, +1}") {
    ParamStore ps;
    flows::ActNormHandles an;
    an.log_scale = ps.add("ls", Tensor({1}));
    an.offset = ps.add("off", Tensor({1}));
    PointCloud batch(2, 1);
    batch.at(0, 0) = 0.0;
    batch.at(1, 0) = 2.0;
    flows::actnorm_init(ps, an, batch);
    PointCloud out = flows::actnorm_forward(ps, an, batch);
    CHECK(out.at(0, 0) == Catch::Approx(-1.0).margin(1e-12));
    CHECK(out.at(1, 0) == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("init batch becomes zero mean, unit variance") {
    ParamStore ps;
    flows::ActNormHandles an;
    an.log_scale = ps.add("ls", Tensor({3}));
    an.offset = ps.add("off", Tensor({3}));
    Rng rng(31);
    PointCloud batch = random_cloud(256, 3, rng, -4.0, 7.0);
    flows::actnorm_init(ps, an, batch);
    PointCloud out = flows::actnorm_forward(ps, an, batch);
    for (int i = 0; i < 3; ++i) {
      double mean = 0.0;
      for (int r = 0; r < out.size(); ++r) mean += out.at(r, i);
      mean /= out.size();
      double var = 0.0;
      for (int r = 0; r < out.size(); ++r) {
        const double c = out.at(r, i) - mean;
        var += c * c;
      }
      var /= out.size();
      CHECK(std::fabs(mean) < 1e-8);
      CHECK(std::fabs(var - 1.0) < 1e-6);
    }
    // forward/inverse round trip
    PointCloud back = flows::actnorm_inverse(ps, an, out);
    CHECK(max_abs_diff(back, batch) < 1e-12);
  }

  SECTION("already standardized batch gives near-zero parameters") {
    ParamStore ps;
    flows::ActNormHandles an;
    an.log_scale = ps.add("ls", Tensor({1}));
    an.offset = ps.add("off", Tensor({1}));
    PointCloud batch(2, 1);
    batch.at(0, 0) = -1.0;
    batch.at(1, 0) = 1.0;
    flows::actnorm_init(ps, an, batch);
    CHECK(std::fabs(ps.at(an.log_scale).value.v[0]) < 1e-12);
    CHECK(std::fabs(ps.at(an.offset).value.v[0]) < 1e-12);
  }

  SECTION("constant batch is rejected") {
    ParamStore ps;
    flows::ActNormHandles an;
    an.log_scale = ps.add("ls", Tensor({2}));
    an.offset = ps.add("off", Tensor({2}));
    PointCloud batch(3, 2);
    CHECK_THROWS_AS(flows::actnorm_init(ps, an, batch), ValidationError);
  }

  SECTION("double init is rejected") {
    ParamStore ps;
    flows::ActNormHandles an;
    an.log_scale = ps.add("ls", Tensor({1}));
    an.offset = ps.add("off", Tensor({1}));
    PointCloud batch(2, 1);
    batch.at(0, 0) = 0.0;
    batch.at(1, 0) = 2.0;
    flows::actnorm_init(ps, an, batch);
    CHECK_THROWS_AS(flows::actnorm_init(ps, an, batch), ValidationError);
  }

  SECTION("forward before initialization is rejected at model level") {
    ModelSpec spec;
    spec.dim = 2;
    spec.flow_count = 1;
    spec.use_actnorm = true;
    FlowModel model = flows::build_flow_model(spec, 7);
    Rng rng(5);
    PointCloud x = random_cloud(4, 2, rng);
    CHECK_THROWS_AS(flows::model_forward(model, x), ValidationError);
  }
}

TEST_CASE("hand-built offset chain produces the expected intermediates") {
  ModelSpec spec;
  spec.dim = 2;
  spec.flow_count = 2;
  spec.mask_pattern = flows::MaskPattern::kFirstHalfCh;
  FlowModel model = flows::build_flow_model(spec, 11);
  REQUIRE(model.units[0].coupling.ch_idx == std::vector<int>{0});
  REQUIRE(model.units[1].coupling.ch_idx == std::vector<int>{1});
  set_net_constant(model, model.units[0].coupling.offset_net, 1.0);
  set_net_constant(model, model.units[1].coupling.offset_net, 1.0);

  PointCloud x(1, 2);
  auto inter = flows::intermediate_outputs(model, x);
  REQUIRE(inter.size() == 3);
  CHECK(inter[0].at(0, 0) == 0.0);
  CHECK(inter[0].at(0, 1) == 0.0);
  CHECK(inter[1].at(0, 0) == Catch::Approx(1.0).margin(1e-15));
  CHECK(inter[1].at(0, 1) == 0.0);
  CHECK(inter[2].at(0, 0) == Catch::Approx(1.0).margin(1e-15));
  CHECK(inter[2].at(0, 1) == Catch::Approx(1.0).margin(1e-15));

  // net shift (1,1)
  PointCloud y = flows::model_forward(model, x);
  CHECK(y.pts == inter[2].pts);
}

TEST_CASE("model forward equals the last intermediate bitwise") {
  ModelSpec spec;
  spec.dim = 5;
  spec.flow_count = 3;
  FlowModel model = flows::build_flow_model(spec, 41);
  Rng rng(43);
  randomize_params(model, rng, -0.7, 0.7);
  PointCloud x = random_cloud(64, 5, rng);
  auto inter = flows::intermediate_outputs(model, x);
  CHECK(flows::model_forward(model, x).pts == inter.back().pts);
}

TEST_CASE("mask complementarity") {
  for (int d : {2, 3, 7}) {
    for (int m : {2, 3, 4, 5}) {
      ModelSpec spec;
      spec.dim = d;
      spec.flow_count = m;
      FlowModel model = flows::build_flow_model(spec, 1);
      std::vector<int> changed(static_cast<std::size_t>(d), 0);
      for (const auto& u : model.units) {
        for (int i : u.coupling.ch_idx) changed[static_cast<std::size_t>(i)]++;
      }
      for (int i = 0; i < d; ++i) CHECK(changed[static_cast<std::size_t>(i)] >= m / 2);
      // adjacent units use complementary partitions
      for (int k = 0; k + 1 < m; ++k) {
        CHECK(model.units[k].coupling.ch_idx == model.units[k + 1].coupling.id_idx);
      }
    }
  }
}

TEST_CASE("model inverse round trips with random parameters") {
  Rng rng(53);
  for (bool actnorm : {false, true}) {
    ModelSpec spec;
    spec.dim = 8;
    spec.flow_count = 4;
    spec.use_actnorm = actnorm;
    FlowModel model = flows::build_flow_model(spec, 61);
    if (actnorm) {
      flows::initialize_actnorm(model, random_cloud(100, 8, rng));
    }
    randomize_params(model, rng, -0.9, 0.9);
    PointCloud x = random_cloud(1000, 8, rng);
    PointCloud y = flows::model_forward(model, x);
    CHECK(max_abs_diff(flows::model_inverse(model, y), x) < 1e-6);
    PointCloud z = flows::model_inverse(model, x);
    CHECK(max_abs_diff(flows::model_forward(model, z), x) < 1e-6);
  }
}

TEST_CASE("jacobian frobenius norm of trivial couplings") {
  ModelSpec spec;
  spec.dim = 2;
  spec.flow_count = 1;
  FlowModel model = flows::build_flow_model(spec, 3);
  PointCloud x(1, 2);
  x.at(0, 0) = 0.4;
  x.at(0, 1) = -0.3;

  SECTION("identity coupling gives d") {
    auto f = flows::unit_jacobian_frobenius_sq(model, 0, x);
    REQUIRE(f.size() == 1);
    CHECK(f[0] == Catch::Approx(2.0).margin(1e-14));
  }

  SECTION("constant scale ln 2 gives 1 + 4") {
    set_net_constant(model, model.units[0].coupling.scale_net,
                     inverse_clamp(std::log(2.0)));
    auto f = flows::unit_jacobian_frobenius_sq(model, 0, x);
    CHECK(f[0] == Catch::Approx(5.0).margin(1e-12));
  }
}

TEST_CASE("jacobian frobenius norm matches the finite-difference jacobian") {
  Rng rng(71);
  for (bool actnorm : {false, true}) {
    for (int d : {2, 3, 5, 8}) {
      ModelSpec spec;
      spec.dim = d;
      spec.flow_count = 2;
      spec.use_actnorm = actnorm;
      FlowModel model = flows::build_flow_model(spec, 100 + d);
      if (actnorm) mark_actnorm_initialized(model);
      randomize_params(model, rng, -0.8, 0.8);
      PointCloud x = random_cloud(5, d, rng);
      for (int m = 0; m < 2; ++m) {
        auto analytic = flows::unit_jacobian_frobenius_sq(model, m, x);
        for (int r = 0; r < x.size(); ++r) {
          const double fd = fd_jacobian_frob_sq(model, m, x, r);
          const double rel = std::fabs(analytic[static_cast<std::size_t>(r)] - fd) /
                             std::max(std::fabs(fd), 1e-12);
          CHECK(rel < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("gradient of the jacobian penalty matches finite differences") {
  Rng rng(83);
  ModelSpec spec;
  spec.dim = 3;
  spec.flow_count = 2;
  spec.use_actnorm = true;
  FlowModel model = flows::build_flow_model(spec, 19);
  mark_actnorm_initialized(model);
  randomize_params(model, rng, -0.6, 0.6);
  PointCloud x = random_cloud(6, 3, rng);

  auto build = [&](diff::Tape& tape) {
    diff::Var xin = tape.value(x.as_tensor());
    auto ev = flows::model_forward_tape(tape, model, xin, true);
    diff::Var acc = tape.mean(ev.frob[0]);
    for (std::size_t m = 1; m < ev.frob.size(); ++m)
      acc = tape.add(acc, tape.mean(ev.frob[m]));
    return acc;
  };
  CHECK(diff::finite_diff_check(build, model.params, 1e-5) < 1e-4);
}

TEST_CASE("tape forward agrees with the plain forward bitwise") {
  Rng rng(97);
  ModelSpec spec;
  spec.dim = 4;
  spec.flow_count = 3;
  spec.use_actnorm = true;
  FlowModel model = flows::build_flow_model(spec, 55);
  flows::initialize_actnorm(model, random_cloud(64, 4, rng));
  randomize_params(model, rng, -0.5, 0.5);
  PointCloud x = random_cloud(32, 4, rng);

  diff::Tape tape(&model.params);
  auto ev = flows::model_forward_tape(tape, model, tape.value(x.as_tensor()), false);
  const auto plain = flows::intermediate_outputs(model, x);
  REQUIRE(ev.inter.size() == plain.size());
  for (std::size_t m = 0; m < plain.size(); ++m) {
    CHECK(tape.val(ev.inter[m]).v == plain[m].pts);
  }
}

TEST_CASE("jvp through a coupling layer matches the directional derivative") {
  Rng rng(111);
  ModelSpec spec;
  spec.dim = 4;
  spec.flow_count = 1;
  FlowModel model = flows::build_flow_model(spec, 77);
  randomize_params(model, rng, -0.8, 0.8);
  const auto& cpl = model.units[0].coupling;

  PointCloud x = random_cloud(3, 4, rng);
  Tensor v({3, 4});
  for (double& e : v.v) e = rng.uniform(-1.0, 1.0);

  diff::Tape tape(&model.params);
  diff::Var jv = diff::jvp(
      tape,
      [&](diff::Tape& tp, diff::DualVar d) { return flows::coupling_dual(tp, cpl, d); },
      x.as_tensor(), v);
  const auto& got = tape.val(jv).v;

  const double h = 1e-6;
  PointCloud xp = x, xm = x;
  for (std::size_t i = 0; i < x.pts.size(); ++i) {
    xp.pts[i] += h * v.v[i];
    xm.pts[i] -= h * v.v[i];
  }
  PointCloud fp = flows::coupling_forward(model.params, cpl, xp);
  PointCloud fm = flows::coupling_forward(model.params, cpl, xm);
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double fd = (fp.pts[i] - fm.pts[i]) / (2.0 * h);
    CHECK(std::fabs(got[i] - fd) / std::max({std::fabs(fd), std::fabs(got[i]), 1e-9}) < 1e-5);
  }
}

TEST_CASE("hutchinson estimator approaches the exact frobenius norm") {
  Rng rng(123);
  ModelSpec spec;
  spec.dim = 4;
  spec.flow_count = 1;
  spec.use_actnorm = true;
  FlowModel model = flows::build_flow_model(spec, 88);
  mark_actnorm_initialized(model);
  randomize_params(model, rng, -0.6, 0.6);
  PointCloud x = random_cloud(4, 4, rng);

  auto exact = flows::unit_jacobian_frobenius_sq(model, 0, x);

  diff::Tape tape(&model.params);
  diff::Var xin = tape.value(x.as_tensor());
  Rng probe_rng(5);
  diff::Var est = flows::unit_hutchinson_frob_tape(tape, model, 0, xin, 400, probe_rng);
  const auto& got = tape.val(est).v;
  for (std::size_t r = 0; r < exact.size(); ++r) {
    CHECK(std::fabs(got[r] - exact[r]) / exact[r] < 0.25);
  }
}
