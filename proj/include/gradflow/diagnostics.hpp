#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradflow/errors.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/integrator.hpp"
#include "gradflow/linalg.hpp"
#include "gradflow/network.hpp"

namespace gradflow {

struct RateFit {
  double lambda_hat = 0.0;
  double r_squared = 1.0;
  double s_lo = 0.0;
  double s_hi = 0.0;
  std::size_t samples_used = 0;
};

// Least-squares slope of ln(cost) against s over the middle 80% of the
// positive-cost samples; the ends are dropped to keep transients and the
// floating-point floor out of the fit.
inline RateFit fit_rate(const std::vector<double>& s,
                        const std::vector<double>& cost) {
  if (s.size() != cost.size()) {
    throw ShapeMismatchError("fit_rate: time and cost lengths differ");
  }
  std::vector<double> si;
  std::vector<double> yi;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (cost[i] > 1e-300) {
      si.push_back(s[i]);
      yi.push_back(std::log(cost[i]));
    }
  }
  if (si.size() < 10) {
    throw InsufficientSamplesError(
        "fit_rate: need at least 10 samples with positive cost, have " +
        std::to_string(si.size()));
  }
  const std::size_t drop = si.size() / 10;
  const std::size_t lo = drop;
  const std::size_t hi = si.size() - drop;  // exclusive
  const std::size_t m = hi - lo;

  double s_mean = 0.0, y_mean = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    s_mean += si[i];
    y_mean += yi[i];
  }
  s_mean /= static_cast<double>(m);
  y_mean /= static_cast<double>(m);

  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    const double ds = si[i] - s_mean;
    const double dy = yi[i] - y_mean;
    sxx += ds * ds;
    sxy += ds * dy;
    syy += dy * dy;
  }
  if (sxx <= 0.0) {
    throw InsufficientSamplesError("fit_rate: window has no time spread");
  }
  const double slope = sxy / sxx;
  RateFit fit;
  fit.lambda_hat = -slope;
  fit.s_lo = si[lo];
  fit.s_hi = si[hi - 1];
  fit.samples_used = m;
  if (syy <= 1e-30) {
    fit.r_squared = 1.0;
  } else {
    const double sse = syy - slope * sxy;
    fit.r_squared = 1.0 - std::max(0.0, sse) / syy;
  }
  return fit;
}

inline RateFit fit_rate(const TrajectoryTable& table) {
  return fit_rate(table.s, table.cost);
}

inline RateFit fit_rate(const Trajectory& traj) {
  return fit_rate(to_table(traj));
}

// How far the recorded parameter-space field is from the output-space law it
// should push forward to. Zero in exact arithmetic for every kind.
inline double pushforward_residual(FlowKind kind, const NetworkSpec& spec,
                                   const TrainingSet& data, const Vector& z,
                                   double tol_rel = kDefaultRankTol) {
  if (kind == FlowKind::ComparisonModel) {
    throw ShapeMismatchError(
        "pushforward_residual: the comparison model has no parameter state");
  }
  const ForwardTrace trace = forward(spec, z, data);
  const Matrix d = jacobian_from_trace(spec, z, data, trace);
  const Vector gx =
      cost_gradient_x(output_vector(trace), data.target, data.sample_count());
  switch (kind) {
    case FlowKind::Standard: {
      const Vector v = -cost_gradient_z_from_trace(spec, z, data, trace);
      return (d * v + d * (d.transpose() * gx)).norm();
    }
    case FlowKind::OverparamModified:
      return (d * field_overparam(d, gx, tol_rel).v + gx).norm();
    case FlowKind::BorderlineModified:
      return (d * field_borderline(d, gx, tol_rel).v + gx).norm();
    case FlowKind::UnderparamModified: {
      const Vector w = d * field_underparam(d, gx, tol_rel).v;
      const Svd dec = svd(d);
      return (w - dec.u * (dec.u.transpose() * w)).norm();
    }
    default:
      break;
  }
  throw ShapeMismatchError("pushforward_residual: unexpected flow kind");
}

struct CriticalPointReport {
  double projected_grad_norm = 0.0;
  double perp_grad_norm = 0.0;
  double cost_value = 0.0;
  double identity_residual = 0.0;
};

// Splits the output-space gradient across range(D) and its complement and
// reports how well the cost matches (N/2) times the two squared norms. At a
// constrained critical point the projected part vanishes and the cost reduces
// to (N/2) times the squared perpendicular norm.
inline CriticalPointReport analyze_critical_point(const NetworkSpec& spec,
                                                  const TrainingSet& data,
                                                  const Vector& z,
                                                  double tol_rel = kDefaultRankTol) {
  const Index k = spec.param_count();
  const Index qn = spec.output_dim() * data.sample_count();
  if (k > qn) {
    throw InvalidShapeError(
        "analyze_critical_point: needs at most as many parameters as output "
        "coordinates");
  }
  const ForwardTrace trace = forward(spec, z, data);
  const Matrix d = jacobian_from_trace(spec, z, data, trace);
  const Svd dec = svd(d);
  RankReport rep = make_rank_report(dec.s, tol_rel);
  if (rep.numerical_rank < k) {
    throw RankDeficientError("analyze_critical_point: derivative lost column rank",
                             rep);
  }
  const Index n = data.sample_count();
  const Vector x = output_vector(trace);
  const Vector g = cost_gradient_x(x, data.target, n);
  const Vector proj = dec.u * (dec.u.transpose() * g);
  const Vector perp = g - proj;

  CriticalPointReport report;
  report.projected_grad_norm = proj.norm();
  report.perp_grad_norm = perp.norm();
  report.cost_value = cost(x, data.target, n);
  report.identity_residual =
      std::abs(report.cost_value -
               0.5 * static_cast<double>(n) *
                   (proj.squaredNorm() + perp.squaredNorm()));
  return report;
}

struct Check {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string claim;
  std::string source;  // "table": recomputable from the CSV; "state": needs Z(s)
};

struct VerificationReport {
  std::vector<Check> checks;

  bool all_pass() const {
    for (const Check& c : checks) {
      if (!c.pass) return false;
    }
    return true;
  }

  const Check* find(const std::string& name) const {
    for (const Check& c : checks) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }
};

inline nlohmann::json to_json(const Check& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["pass"] = c.pass;
  if (std::isfinite(c.measured)) {
    j["measured"] = c.measured;
  } else {
    j["measured"] = nullptr;
  }
  j["tolerance"] = c.tolerance;
  j["claim"] = c.claim;
  j["source"] = c.source;
  return j;
}

inline nlohmann::json to_json(const VerificationReport& r) {
  nlohmann::json j;
  j["pass"] = r.all_pass();
  j["checks"] = nlohmann::json::array();
  for (const Check& c : r.checks) {
    j["checks"].push_back(to_json(c));
  }
  return j;
}

struct VerifyTolerances {
  double monotone_step = 1e-9;            // allowed cost increase per step
  double pushforward_scale = 1e-9;        // times (1+|grad|)*cond, or times |Dv|
  double standard_pushforward_rel = 1e-12;
  double decomposition_scale = 1e-10;     // times (1+cost)
  double rate_rel = 0.01;
  double x_residual_rel = 1e-4;
};

struct TableExpectations {
  std::optional<double> cost_rate;      // expected exponential rate of the cost
  std::optional<double> residual_rate;  // expected rate of the output residual
  Index sample_every = 1;
};

// Checks computable from the five CSV columns alone. run and the standalone
// CSV verifier share this path, so both produce identical entries for
// identical data.
inline VerificationReport verify_table(const TrajectoryTable& table,
                                       const TableExpectations& expect,
                                       const VerifyTolerances& tol = {}) {
  VerificationReport report;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  {
    Check c;
    c.name = "cost_monotone";
    c.claim = "cost is nonincreasing along the orbit";
    c.source = "table";
    c.tolerance = tol.monotone_step * static_cast<double>(expect.sample_every);
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < table.cost.size(); ++i) {
      worst = std::max(worst, table.cost[i + 1] - table.cost[i]);
    }
    if (table.cost.size() < 2) worst = 0.0;
    c.measured = worst;
    c.pass = worst <= c.tolerance;
    report.checks.push_back(std::move(c));
  }

  if (expect.cost_rate) {
    Check c;
    c.name = "cost_rate";
    c.claim = "cost decays exponentially at the uniform rate fixed by the sample count";
    c.source = "table";
    c.tolerance = tol.rate_rel;
    try {
      const RateFit fit = fit_rate(table);
      c.measured = std::abs(fit.lambda_hat - *expect.cost_rate) /
                   std::abs(*expect.cost_rate);
      c.pass = c.measured <= c.tolerance;
    } catch (const InsufficientSamplesError&) {
      c.measured = nan;
      c.pass = false;
    }
    report.checks.push_back(std::move(c));
  }

  if (expect.residual_rate) {
    Check c;
    c.name = "x_residual_decay";
    c.claim = "output residual decays exponentially at the uniform rate fixed by the sample count";
    c.source = "table";
    c.tolerance = tol.x_residual_rel;
    if (table.x_residual.empty() || table.x_residual.front() <= 1e-300) {
      c.measured = 0.0;
      c.pass = true;
    } else {
      const double r0 = table.x_residual.front();
      const double s0 = table.s.front();
      double worst = 0.0;
      for (std::size_t i = 1; i < table.size(); ++i) {
        const double pred =
            r0 * std::exp(-(*expect.residual_rate) * (table.s[i] - s0));
        if (pred <= 1e-280) continue;
        worst = std::max(worst, std::abs(table.x_residual[i] - pred) / pred);
      }
      c.measured = worst;
      c.pass = worst <= c.tolerance;
    }
    report.checks.push_back(std::move(c));
  }

  return report;
}

inline TableExpectations expectations_for(FlowKind kind, Index n,
                                          Index sample_every) {
  TableExpectations e;
  e.sample_every = sample_every;
  if (kind == FlowKind::OverparamModified ||
      kind == FlowKind::BorderlineModified ||
      kind == FlowKind::ComparisonModel) {
    e.cost_rate = 2.0 / static_cast<double>(n);
    e.residual_rate = 1.0 / static_cast<double>(n);
  }
  return e;
}

// Full verification: the table checks plus the state-dependent identities
// evaluated at every recorded sample. Failures are reported, never thrown.
inline VerificationReport verify_trajectory(const Trajectory& traj,
                                            const NetworkSpec& spec,
                                            const TrainingSet& data,
                                            const VerifyTolerances& tol = {},
                                            double tol_rel = kDefaultRankTol) {
  const Index n = data.sample_count();
  VerificationReport report =
      verify_table(to_table(traj), expectations_for(traj.kind, n, traj.sample_every), tol);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  const bool modified = traj.kind == FlowKind::OverparamModified ||
                        traj.kind == FlowKind::UnderparamModified ||
                        traj.kind == FlowKind::BorderlineModified;

  if (traj.kind != FlowKind::ComparisonModel) {
    Check c;
    c.source = "state";
    c.tolerance = traj.kind == FlowKind::Standard ? tol.standard_pushforward_rel
                                                  : tol.pushforward_scale;
    switch (traj.kind) {
      case FlowKind::Standard:
        c.name = "pushforward_standard";
        c.claim = "output velocity equals minus the Gram mobility applied to the output gradient";
        break;
      case FlowKind::UnderparamModified:
        c.name = "pushforward_range";
        c.claim = "output velocity has no component outside the range of the derivative";
        break;
      default:
        c.name = "pushforward_gradient";
        c.claim = "parameter field pushes the state along the plain output-space gradient flow";
        break;
    }
    double worst = 0.0;
    try {
      for (const FlowSample& sample : traj.samples) {
        if (sample.z.size() == 0) continue;
        const double res =
            pushforward_residual(traj.kind, spec, data, sample.z, tol_rel);
        const ForwardTrace trace = forward(spec, sample.z, data);
        const Vector gx =
            cost_gradient_x(output_vector(trace), data.target, n);
        double scale = 1.0;
        if (traj.kind == FlowKind::Standard) {
          const Matrix d = jacobian_from_trace(spec, sample.z, data, trace);
          scale = std::max((d * (d.transpose() * gx)).norm(), 1e-300);
        } else if (traj.kind == FlowKind::UnderparamModified) {
          const Matrix d = jacobian_from_trace(spec, sample.z, data, trace);
          const Vector w = d * field_underparam(d, gx, tol_rel).v;
          scale = std::max(w.norm(), 1e-300);
        } else {
          const double cond = sample.rank.condition_estimate > 0.0
                                  ? sample.rank.condition_estimate
                                  : 1.0;
          scale = (1.0 + gx.norm()) * cond;
        }
        worst = std::max(worst, res / scale);
      }
      c.measured = worst;
      c.pass = worst <= c.tolerance;
    } catch (const RankDeficientError&) {
      c.measured = nan;
      c.pass = false;
    }
    report.checks.push_back(std::move(c));
  }

  if (traj.kind == FlowKind::UnderparamModified) {
    Check c;
    c.name = "decomposition_identity";
    c.claim = "cost equals half the sample count times the squared split gradient norms";
    c.source = "state";
    c.tolerance = tol.decomposition_scale;
    double worst = 0.0;
    try {
      for (const FlowSample& sample : traj.samples) {
        if (sample.z.size() == 0) continue;
        const CriticalPointReport cp =
            analyze_critical_point(spec, data, sample.z, tol_rel);
        worst = std::max(worst, cp.identity_residual / (1.0 + cp.cost_value));
      }
      c.measured = worst;
      c.pass = worst <= c.tolerance;
    } catch (const RankDeficientError&) {
      c.measured = nan;
      c.pass = false;
    }
    report.checks.push_back(std::move(c));
  }

  if (modified) {
    Check c;
    c.name = "rank_full";
    c.claim = "derivative keeps full rank along the recorded orbit";
    c.source = "state";
    c.tolerance = tol_rel;
    double worst = std::numeric_limits<double>::infinity();
    for (const FlowSample& sample : traj.samples) {
      if (sample.rank.singular_values.size() > 0) {
        worst = std::min(worst, sample.sigma_ratio);
      }
    }
    c.measured = std::isfinite(worst) ? worst : nan;
    c.pass = traj.termination != Termination::RankLost;
    report.checks.push_back(std::move(c));
  }

  {
    Check c;
    c.name = "stop_rule_achieved";
    c.claim = "the configured stop rule fired before the time cap";
    c.source = "state";
    c.tolerance = traj.stop.value;
    const FlowSample& last = traj.samples.back();
    switch (traj.stop.kind) {
      case StopRule::Kind::CostBelow:
      case StopRule::Kind::StoppingTimeFormula:
        c.measured = last.cost;
        break;
      case StopRule::Kind::FieldNormBelow:
        c.measured = last.field_norm;
        break;
      case StopRule::Kind::TimeLimit:
        c.measured = last.s;
        break;
    }
    c.pass = traj.termination == Termination::Stopped;
    report.checks.push_back(std::move(c));
  }

  return report;
}

}  // namespace gradflow
