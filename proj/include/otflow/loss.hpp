#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "otflow/flows.hpp"
#include "otflow/otoracle.hpp"
#include "otflow/pointcloud.hpp"
#include "otflow/swdist.hpp"

namespace otflow::losstrain {

using diff::Tape;
using diff::Var;

struct LossConfig {
  double lambda = 0.05;   // transport-cost weight
  double gamma = 0.01;    // Jacobian-energy weight
  double order = 2.0;     // SW order p
  bool regularize = true;
  bool semi_discrete = false;
  bool hutchinson = false;   // trade the exact ||J||_F^2 for the estimator
  int hutchinson_probes = 4;

  void validate() const {
    if (lambda < 0.0 || gamma < 0.0)
      throw ValidationError("loss config: lambda and gamma must be >= 0");
    if (order < 1.0) throw ValidationError("loss config: p must be >= 1");
    if (hutchinson_probes < 1)
      throw ValidationError("loss config: hutchinson probes must be >= 1");
  }
};

// Scalar loss plus its per-term breakdown. `fidelity` is the term that enters
// the loss: SW_p^p in the discrete setting, the Gaussian NLL in semi-discrete
// mode. `sw` is the rooted distance shown in reports (equal to the NLL in
// semi-discrete mode, where no root applies).
struct LossReport {
  double total = 0.0;
  double fidelity = 0.0;
  double sw = 0.0;
  std::vector<double> flow_costs;     // unweighted per-flow means
  std::vector<double> flow_energies;  // unweighted per-flow means
  int slices = 0;
  double lambda = 0.0;
  double gamma = 0.0;

  double decomposition_residual() const {
    double reg = 0.0;
    for (double c : flow_costs) reg += c;
    reg *= lambda;
    double en = 0.0;
    for (double e : flow_energies) en += e;
    reg += gamma * en;
    const double lhs = total;
    const double rhs = fidelity + reg;
    return std::fabs(lhs - rhs) / std::max({std::fabs(lhs), std::fabs(rhs), 1e-30});
  }
};

struct LossEval {
  Var total;
  LossReport report;
};

namespace detail {

struct RegVars {
  Var cost_sum;    // valid when the model has >= 1 flow
  Var energy_sum;  // valid only when energies were built
};

// Per-flow transport costs (always, they feed the report) and Jacobian
// energies (only when `with_energies`). The 1/N normalization keeps lambda
// and gamma batch-size independent.
inline RegVars build_regularization(Tape& tape, const flows::FlowModel& model,
                                    const flows::FlowTapeEval& ev,
                                    const LossConfig& cfg, int batch_size,
                                    Rng* hutch_rng, LossReport& report) {
  RegVars out;
  const double inv_n = 1.0 / batch_size;
  for (int m = 0; m < model.flow_count(); ++m) {
    Var diff = tape.sub(ev.inter[static_cast<std::size_t>(m) + 1],
                        ev.inter[static_cast<std::size_t>(m)]);
    Var cost = tape.scale(tape.sum(tape.square(diff)), inv_n);
    report.flow_costs.push_back(tape.scalar_val(cost));
    out.cost_sum = (m == 0) ? cost : tape.add(out.cost_sum, cost);
  }
  const bool with_energies = !ev.frob.empty() || cfg.hutchinson;
  if (!with_energies) {
    report.flow_energies.assign(static_cast<std::size_t>(model.flow_count()), 0.0);
    return out;
  }
  for (int m = 0; m < model.flow_count(); ++m) {
    Var frob;
    if (cfg.hutchinson) {
      if (!hutch_rng)
        throw ValidationError("hutchinson mode needs a probe generator");
      frob = flows::unit_hutchinson_frob_tape(
          tape, model, m, ev.inter[static_cast<std::size_t>(m)],
          cfg.hutchinson_probes, *hutch_rng);
    } else {
      frob = ev.frob[static_cast<std::size_t>(m)];
    }
    Var energy = tape.mean(frob);
    report.flow_energies.push_back(tape.scalar_val(energy));
    out.energy_sum = (m == 0) ? energy : tape.add(out.energy_sum, energy);
  }
  return out;
}

inline Var assemble_total(Tape& tape, Var fidelity, const RegVars& reg,
                          const LossConfig& cfg, bool with_reg) {
  Var total = fidelity;
  if (with_reg && reg.cost_sum.valid())
    total = tape.add(total, tape.scale(reg.cost_sum, cfg.lambda));
  if (with_reg && reg.energy_sum.valid())
    total = tape.add(total, tape.scale(reg.energy_sum, cfg.gamma));
  return total;
}

}  // namespace detail

// The training objective on a mini-batch:
//   SW_p^p(T(x), y) + (1/N) sum_n sum_m [ lambda c(T_{m-1}x_n, T_m x_n)
//                                         + gamma ||J_{T_m}||_F^2 ]
// with the Jacobian of flow m evaluated at that flow's input T_{[m-1]}(x_n).
inline LossEval swot_loss_tape(Tape& tape, const flows::FlowModel& model,
                               const PointCloud& batch_x, const PointCloud& batch_y,
                               const swdist::ProjectionSet& proj,
                               const LossConfig& cfg, Rng* hutch_rng = nullptr) {
  cfg.validate();
  if (cfg.order != proj.order)
    throw ValidationError("loss order p and projection-set order disagree");
  if (batch_x.size() != batch_y.size())
    throw ValidationError("swot_loss: batches must have equal sizes");
  flows::require_initialized(model);

  LossEval ev;
  ev.report.slices = proj.count();
  const bool with_reg = cfg.regularize;
  const bool analytic_jac = with_reg && !cfg.hutchinson;

  Var x0 = tape.value(batch_x.as_tensor());
  flows::FlowTapeEval fwd = flows::model_forward_tape(tape, model, x0, analytic_jac);
  Var fidelity =
      swdist::sliced_wasserstein_pow_tape(tape, fwd.inter.back(), batch_y, proj);
  LossConfig reg_cfg = cfg;
  reg_cfg.hutchinson = with_reg && cfg.hutchinson;
  detail::RegVars reg = detail::build_regularization(
      tape, model, fwd, reg_cfg, batch_x.size(), hutch_rng, ev.report);
  ev.total = detail::assemble_total(tape, fidelity, reg, cfg, with_reg);

  ev.report.total = tape.scalar_val(ev.total);
  ev.report.fidelity = tape.scalar_val(fidelity);
  ev.report.sw = std::pow(ev.report.fidelity, 1.0 / cfg.order);
  ev.report.lambda = with_reg ? cfg.lambda : 0.0;
  ev.report.gamma = with_reg ? cfg.gamma : 0.0;
  if (!with_reg)
    ev.report.flow_energies.assign(static_cast<std::size_t>(model.flow_count()), 0.0);
  return ev;
}

// Semi-discrete variant: the SW fidelity is replaced by the negative mean
// log-density of the transported batch under an explicit Gaussian target.
inline LossEval semi_discrete_loss_tape(Tape& tape, const flows::FlowModel& model,
                                        const PointCloud& batch_x,
                                        const oracle::GaussianParams& target,
                                        const LossConfig& cfg,
                                        Rng* hutch_rng = nullptr) {
  cfg.validate();
  target.validate();
  if (batch_x.dim != target.dim())
    throw ValidationError("semi_discrete_loss: dimension mismatch");
  flows::require_initialized(model);

  LossEval ev;
  const bool with_reg = cfg.regularize;
  const bool analytic_jac = with_reg && !cfg.hutchinson;

  Var x0 = tape.value(batch_x.as_tensor());
  flows::FlowTapeEval fwd = flows::model_forward_tape(tape, model, x0, analytic_jac);

  const int d = target.dim();
  const Eigen::LLT<Eigen::MatrixXd> llt(target.cov);
  double log_det = 0.0;
  for (int i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
  const Eigen::MatrixXd precision =
      llt.solve(Eigen::MatrixXd::Identity(d, d));
  Tensor prec_t({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      prec_t.v[static_cast<std::size_t>(i) * d + j] = precision(i, j);
  Tensor neg_mean({d});
  for (int i = 0; i < d; ++i) neg_mean.v[static_cast<std::size_t>(i)] = -target.mean(i);

  Var centered = tape.last_axis_add(fwd.inter.back(), tape.value(std::move(neg_mean)));
  Var mahal = tape.mul(centered, tape.matmul_nt(centered, tape.value(std::move(prec_t))));
  Var quad = tape.scale(tape.sum(mahal), 0.5 / batch_x.size());
  const double log_norm =
      0.5 * (d * std::log(2.0 * 3.14159265358979323846) + log_det);
  Var fidelity = tape.add_const(quad, log_norm);

  detail::RegVars reg = detail::build_regularization(
      tape, model, fwd, cfg, batch_x.size(), hutch_rng, ev.report);
  ev.total = detail::assemble_total(tape, fidelity, reg, cfg, with_reg);

  ev.report.total = tape.scalar_val(ev.total);
  ev.report.fidelity = tape.scalar_val(fidelity);
  ev.report.sw = ev.report.fidelity;  // no root applies to a log-likelihood
  ev.report.lambda = with_reg ? cfg.lambda : 0.0;
  ev.report.gamma = with_reg ? cfg.gamma : 0.0;
  if (!with_reg)
    ev.report.flow_energies.assign(static_cast<std::size_t>(model.flow_count()), 0.0);
  return ev;
}

// Value-only conveniences.
inline LossReport swot_loss(flows::FlowModel& model, const PointCloud& batch_x,
                            const PointCloud& batch_y,
                            const swdist::ProjectionSet& proj,
                            const LossConfig& cfg) {
  Tape tape(&model.params);
  Rng hutch(0x48);
  return swot_loss_tape(tape, model, batch_x, batch_y, proj, cfg, &hutch).report;
}

inline LossReport semi_discrete_loss(flows::FlowModel& model,
                                     const PointCloud& batch_x,
                                     const oracle::GaussianParams& target,
                                     const LossConfig& cfg) {
  Tape tape(&model.params);
  Rng hutch(0x48);
  return semi_discrete_loss_tape(tape, model, batch_x, target, cfg, &hutch).report;
}

}  // namespace otflow::losstrain
