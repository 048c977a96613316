#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gradflow/errors.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/linalg.hpp"
#include "gradflow/network.hpp"

namespace gradflow {

enum class Method { Euler, RK4, AdaptiveRK45 };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Euler: return "euler";
    case Method::RK4: return "rk4";
    case Method::AdaptiveRK45: return "adaptive-rk45";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "euler") return Method::Euler;
  if (s == "rk4") return Method::RK4;
  if (s == "adaptive-rk45" || s == "rk45") return Method::AdaptiveRK45;
  throw ConfigError("unknown integration method: " + s);
}

inline constexpr double kMinStep = 1e-14;

struct IntegratorConfig {
  Method method = Method::RK4;
  double step = 1e-2;   // fixed step, or the initial step for the adaptive method
  double s_max = 1.0;   // hard cap on flow time
  double abs_tol = 1e-10;
  double rel_tol = 1e-10;
  Index sample_every = 1;

  void validate() const {
    if (!(step > 0.0)) throw NonPositiveError("integrator step must be positive");
    if (!(s_max > 0.0)) throw NonPositiveError("integrator s_max must be positive");
    if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) {
      throw NonPositiveError("integrator tolerances must be positive");
    }
    if (sample_every < 1) {
      throw NonPositiveError("sample_every must be at least 1");
    }
  }
};

// Flow time at which the closed-form decay e^{-2s/N} C(0) first reaches eps.
inline double stopping_time(double c0, double eps, Index n) {
  if (!(c0 > 0.0)) throw NonPositiveError("stopping_time: initial cost must be positive");
  if (!(eps > 0.0)) throw NonPositiveError("stopping_time: eps must be positive");
  if (n < 1) throw NonPositiveError("stopping_time: sample count must be >= 1");
  return std::max(0.0, 0.5 * static_cast<double>(n) * std::log(c0 / eps));
}

struct StopRule {
  enum class Kind { TimeLimit, CostBelow, StoppingTimeFormula, FieldNormBelow };
  Kind kind = Kind::TimeLimit;
  double value = 1.0;

  static StopRule time_limit(double s) { return {Kind::TimeLimit, s}; }
  static StopRule cost_below(double eps) { return {Kind::CostBelow, eps}; }
  static StopRule stopping_time_formula(double eps) {
    return {Kind::StoppingTimeFormula, eps};
  }
  static StopRule field_norm_below(double delta) {
    return {Kind::FieldNormBelow, delta};
  }

  void validate() const {
    if (!(value > 0.0)) throw NonPositiveError("stop-rule threshold must be positive");
  }
};

inline std::string to_string(StopRule::Kind k) {
  switch (k) {
    case StopRule::Kind::TimeLimit: return "time-limit";
    case StopRule::Kind::CostBelow: return "cost-below";
    case StopRule::Kind::StoppingTimeFormula: return "stopping-time-formula";
    case StopRule::Kind::FieldNormBelow: return "field-norm-below";
  }
  return "?";
}

inline StopRule::Kind stop_kind_from_string(const std::string& s) {
  if (s == "time-limit") return StopRule::Kind::TimeLimit;
  if (s == "cost-below") return StopRule::Kind::CostBelow;
  if (s == "stopping-time-formula") return StopRule::Kind::StoppingTimeFormula;
  if (s == "field-norm-below") return StopRule::Kind::FieldNormBelow;
  throw ConfigError("unknown stop rule: " + s);
}

enum class Termination { Stopped, RankLost, StepUnderflow, Completed };

inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::Stopped: return "stopped";
    case Termination::RankLost: return "rank-lost";
    case Termination::StepUnderflow: return "step-underflow";
    case Termination::Completed: return "completed";
  }
  return "?";
}

// One recorded state. z is empty for the output-space comparison model; the
// sigma ratio is 1.0 for kinds that never factor the derivative.
struct FlowSample {
  double s = 0.0;
  Vector z;
  Vector x;
  double cost = 0.0;
  double field_norm = 0.0;
  double x_residual = 0.0;
  double sigma_ratio = 1.0;
  RankReport rank;
};

struct Trajectory {
  FlowKind kind = FlowKind::Standard;
  StopRule stop;
  std::vector<FlowSample> samples;
  Termination termination = Termination::Completed;
  double rank_lost_s = 0.0;
  RankReport rank_lost_report;
  long total_steps = 0;     // accepted
  long rejected_steps = 0;  // adaptive only
  Index sample_every = 1;

  const FlowSample& final_sample() const { return samples.back(); }
};

template <typename F>
Vector euler_step(F&& f, const Vector& y, double h, const Vector& k1) {
  (void)f;
  return y + h * k1;
}

template <typename F>
Vector euler_step(F&& f, const Vector& y, double h) {
  return y + h * f(y);
}

template <typename F>
Vector rk4_step(F&& f, const Vector& y, double h, const Vector& k1) {
  const Vector k2 = f(y + (0.5 * h) * k1);
  const Vector k3 = f(y + (0.5 * h) * k2);
  const Vector k4 = f(y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

template <typename F>
Vector rk4_step(F&& f, const Vector& y, double h) {
  const Vector k1 = f(y);
  return rk4_step(f, y, h, k1);
}

namespace detail {

// Dormand-Prince 5(4) tableau.
struct Dopri {
  static constexpr double a21 = 1.0 / 5.0;
  static constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
  static constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
  static constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0,
                          a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
  static constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0,
                          a63 = 46732.0 / 5247.0, a64 = 49.0 / 176.0,
                          a65 = -5103.0 / 18656.0;
  static constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0,
                          b4 = 125.0 / 192.0, b5 = -2187.0 / 6784.0,
                          b6 = 11.0 / 84.0;
  // b - b*: weights of the embedded error estimate.
  static constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0,
                          e4 = 71.0 / 1920.0, e5 = -17253.0 / 339200.0,
                          e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
};

struct FieldPoint {
  Vector deriv;
  Vector x;
  double cost = 0.0;
  std::optional<RankReport> rank;
};

inline bool reached(double s, double target) {
  return s >= target - 1e-12 * std::max(1.0, std::abs(target));
}

// Shared time loop for every flow kind.
//   eval(y)     -> FieldPoint with derivative and diagnostics; may throw
//                  RankDeficientError.
//   observe(y)  -> FieldPoint with x and cost only, used when the derivative
//                  is unavailable at a rank-loss state.
//   decorate(sample, y, point) -> fills kind-specific sample fields
//                  (parameter copy, rank report, sigma ratio).
template <typename EvalFn, typename ObserveFn, typename DecorateFn>
Trajectory run_loop(FlowKind kind, Vector y, Index n,
                    const IntegratorConfig& cfg, const StopRule& stop,
                    const Vector& target, EvalFn eval, ObserveFn observe,
                    DecorateFn decorate) {
  cfg.validate();
  stop.validate();

  Trajectory traj;
  traj.kind = kind;
  traj.stop = stop;
  traj.sample_every = cfg.sample_every;

  const double inf = std::numeric_limits<double>::infinity();
  double s = 0.0;
  double s_target = stop.kind == StopRule::Kind::TimeLimit ? stop.value : inf;
  double s_cap = std::min(cfg.s_max, s_target);
  double h_next = cfg.step;
  bool first = true;
  bool pending_record = false;

  auto record = [&](const FieldPoint& p) {
    FlowSample sample;
    sample.s = s;
    sample.x = p.x;
    sample.cost = p.cost;
    sample.field_norm = p.deriv.size() > 0
                            ? p.deriv.norm()
                            : std::numeric_limits<double>::quiet_NaN();
    sample.x_residual = (p.x - target).norm();
    decorate(sample, y, p);
    traj.samples.push_back(std::move(sample));
  };

  auto record_rank_loss = [&](const RankDeficientError& err) {
    traj.termination = Termination::RankLost;
    traj.rank_lost_s = s;
    traj.rank_lost_report = err.report;
    if (!traj.samples.empty() && traj.samples.back().s >= s) return;
    FieldPoint p = observe(y);
    p.rank = err.report;
    record(p);
  };

  while (true) {
    FieldPoint fp;
    try {
      fp = eval(y);
    } catch (const RankDeficientError& err) {
      record_rank_loss(err);
      return traj;
    }

    if (first && stop.kind == StopRule::Kind::StoppingTimeFormula) {
      s_target = fp.cost <= stop.value ? 0.0 : stopping_time(fp.cost, stop.value, n);
      s_cap = std::min(cfg.s_max, s_target);
    }

    bool fired = false;
    switch (stop.kind) {
      case StopRule::Kind::CostBelow:
        fired = fp.cost <= stop.value;
        break;
      case StopRule::Kind::FieldNormBelow:
        fired = fp.deriv.norm() <= stop.value;
        break;
      case StopRule::Kind::TimeLimit:
      case StopRule::Kind::StoppingTimeFormula:
        fired = reached(s, s_target);
        break;
    }
    const bool at_cap = !fired && reached(s, cfg.s_max);

    if (first || pending_record || fired || at_cap) {
      if (traj.samples.empty() || traj.samples.back().s < s) record(fp);
    }
    first = false;
    pending_record = false;
    if (fired) {
      traj.termination = Termination::Stopped;
      return traj;
    }
    if (at_cap) {
      traj.termination = Termination::Completed;
      return traj;
    }

    auto stage = [&](const Vector& yy) { return eval(yy).deriv; };

    try {
      if (cfg.method == Method::Euler || cfg.method == Method::RK4) {
        const double h = std::min(cfg.step, s_cap - s);
        Vector ynew = cfg.method == Method::Euler
                          ? euler_step(stage, y, h, fp.deriv)
                          : rk4_step(stage, y, h, fp.deriv);
        require_finite(ynew, "integration state");
        y = std::move(ynew);
        s += h;
      } else {
        using T = Dopri;
        double h = std::min(h_next, s_cap - s);
        bool accepted = false;
        while (!accepted) {
          // A trial state may leave the full-rank region even though the
          // current state is healthy; that only means the step was too long,
          // so it is rejected like any other unusable trial.
          bool trial_rank_failed = false;
          double err = std::numeric_limits<double>::quiet_NaN();
          Vector ynew;
          try {
            const Vector& k1 = fp.deriv;
            const Vector k2 = stage(y + h * (T::a21 * k1));
            const Vector k3 = stage(y + h * (T::a31 * k1 + T::a32 * k2));
            const Vector k4 =
                stage(y + h * (T::a41 * k1 + T::a42 * k2 + T::a43 * k3));
            const Vector k5 = stage(
                y + h * (T::a51 * k1 + T::a52 * k2 + T::a53 * k3 + T::a54 * k4));
            const Vector k6 =
                stage(y + h * (T::a61 * k1 + T::a62 * k2 + T::a63 * k3 +
                               T::a64 * k4 + T::a65 * k5));
            ynew = y + h * (T::b1 * k1 + T::b3 * k3 + T::b4 * k4 + T::b5 * k5 +
                            T::b6 * k6);
            const Vector k7 = stage(ynew);
            const Vector escaled = h * (T::e1 * k1 + T::e3 * k3 + T::e4 * k4 +
                                        T::e5 * k5 + T::e6 * k6 + T::e7 * k7);
            err = 0.0;
            for (Index i = 0; i < y.size(); ++i) {
              const double scale =
                  cfg.abs_tol +
                  cfg.rel_tol * std::max(std::abs(y(i)), std::abs(ynew(i)));
              const double r = escaled(i) / scale;
              err += r * r;
            }
            err =
                std::sqrt(err / static_cast<double>(std::max<Index>(y.size(), 1)));
          } catch (const RankDeficientError&) {
            trial_rank_failed = true;
          }

          if (!trial_rank_failed && std::isfinite(err) && err <= 1.0 &&
              ynew.allFinite()) {
            accepted = true;
            y = std::move(ynew);
            s += h;
            h_next = h * (err == 0.0
                              ? 5.0
                              : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0));
          } else {
            ++traj.rejected_steps;
            h *= !trial_rank_failed && std::isfinite(err) && err > 0.0
                     ? std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.9)
                     : 0.1;
            if (h < kMinStep) {
              traj.termination = Termination::StepUnderflow;
              return traj;
            }
          }
        }
      }
    } catch (const RankDeficientError& err) {
      record_rank_loss(err);
      return traj;
    }

    ++traj.total_steps;
    pending_record = (traj.total_steps % cfg.sample_every) == 0;
  }
}

}  // namespace detail

inline Trajectory integrate(FlowKind kind, const NetworkSpec& spec,
                            const TrainingSet& data, const Vector& z0,
                            const IntegratorConfig& cfg, const StopRule& stop,
                            double tol_rel = kDefaultRankTol) {
  require_params(spec, z0);
  if (spec.output_dim() != data.output_dim() ||
      spec.input_dim() != data.input_dim()) {
    throw ShapeMismatchError("integrate: network and dataset shapes differ");
  }
  const Index k = spec.param_count();
  const Index n = data.sample_count();
  const Index qn = data.output_dim() * n;
  if (!kind_admissible(kind, k, qn)) {
    throw InvalidShapeError("flow kind " + to_string(kind) +
                            " is not admissible for K=" + std::to_string(k) +
                            ", QN=" + std::to_string(qn));
  }

  if (kind == FlowKind::ComparisonModel) {
    auto eval = [&](const Vector& y) {
      detail::FieldPoint p;
      p.x = y;
      p.cost = cost(y, data.target, n);
      p.deriv = field_comparison(y, data.target, n);
      return p;
    };
    auto observe = [&](const Vector& y) {
      detail::FieldPoint p;
      p.x = y;
      p.cost = cost(y, data.target, n);
      return p;
    };
    auto decorate = [](FlowSample& sample, const Vector&, const detail::FieldPoint&) {
      sample.sigma_ratio = 1.0;
    };
    return detail::run_loop(kind, forward_vector(spec, z0, data), n, cfg, stop,
                            data.target, eval, observe, decorate);
  }

  auto eval = [&, kind, tol_rel](const Vector& y) {
    detail::FieldPoint p;
    const ForwardTrace trace = forward(spec, y, data);
    p.x = output_vector(trace);
    p.cost = cost(p.x, data.target, n);
    if (kind == FlowKind::Standard) {
      p.deriv = -cost_gradient_z_from_trace(spec, y, data, trace);
      return p;
    }
    const Matrix d = jacobian_from_trace(spec, y, data, trace);
    const Vector gx = cost_gradient_x(p.x, data.target, n);
    FieldEval fe;
    switch (kind) {
      case FlowKind::OverparamModified:
        fe = field_overparam(d, gx, tol_rel);
        break;
      case FlowKind::UnderparamModified:
        fe = field_underparam(d, gx, tol_rel);
        break;
      case FlowKind::BorderlineModified:
        fe = field_borderline(d, gx, tol_rel);
        break;
      default:
        throw ShapeMismatchError("unexpected flow kind in field evaluation");
    }
    p.deriv = std::move(fe.v);
    p.rank = std::move(fe.rank);
    return p;
  };
  auto observe = [&](const Vector& y) {
    detail::FieldPoint p;
    p.x = forward_vector(spec, y, data);
    p.cost = cost(p.x, data.target, n);
    return p;
  };
  auto decorate = [&, kind, tol_rel](FlowSample& sample, const Vector& y,
                                     const detail::FieldPoint& p) {
    sample.z = y;
    if (p.rank) {
      sample.rank = *p.rank;
    } else if (kind == FlowKind::Standard) {
      sample.rank = numerical_rank(jacobian(spec, y, data), tol_rel);
    }
    sample.sigma_ratio =
        sample.rank.singular_values.size() > 0 ? sample.rank.sigma_min_over_max() : 1.0;
  };
  return detail::run_loop(kind, z0, n, cfg, stop, data.target, eval, observe,
                          decorate);
}

// Output-space comparison run without a network: the state is x itself.
inline Trajectory integrate_comparison(const Vector& x0, const Vector& target,
                                       Index n, const IntegratorConfig& cfg,
                                       const StopRule& stop) {
  if (x0.size() != target.size()) {
    throw ShapeMismatchError("integrate_comparison: lengths differ");
  }
  if (n < 1 || x0.size() % n != 0) {
    throw ShapeMismatchError(
        "integrate_comparison: state length must be a multiple of the sample count");
  }
  require_finite(x0, "comparison initial state");
  auto eval = [&](const Vector& y) {
    detail::FieldPoint p;
    p.x = y;
    p.cost = cost(y, target, n);
    p.deriv = field_comparison(y, target, n);
    return p;
  };
  auto observe = [&](const Vector& y) {
    detail::FieldPoint p;
    p.x = y;
    p.cost = cost(y, target, n);
    return p;
  };
  auto decorate = [](FlowSample& sample, const Vector&, const detail::FieldPoint&) {
    sample.sigma_ratio = 1.0;
  };
  return detail::run_loop(FlowKind::ComparisonModel, x0, n, cfg, stop, target,
                          eval, observe, decorate);
}

struct TrajectoryTable {
  std::vector<double> s;
  std::vector<double> cost;
  std::vector<double> field_norm;
  std::vector<double> sigma_ratio;
  std::vector<double> x_residual;

  std::size_t size() const { return s.size(); }
};

inline TrajectoryTable to_table(const Trajectory& traj) {
  TrajectoryTable t;
  for (const FlowSample& sample : traj.samples) {
    t.s.push_back(sample.s);
    t.cost.push_back(sample.cost);
    t.field_norm.push_back(sample.field_norm);
    t.sigma_ratio.push_back(sample.sigma_ratio);
    t.x_residual.push_back(sample.x_residual);
  }
  return t;
}

inline const char* kTrajectoryCsvHeader =
    "s,cost,field_norm,sigma_min_over_max,x_residual_norm";

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  os << kTrajectoryCsvHeader << '\n';
  for (const FlowSample& sample : traj.samples) {
    os << format_double(sample.s) << ',' << format_double(sample.cost) << ','
       << format_double(sample.field_norm) << ','
       << format_double(sample.sigma_ratio) << ','
       << format_double(sample.x_residual) << '\n';
  }
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_trajectory_csv(os, traj);
  if (!os) throw IoError("write failed: " + path);
}

inline TrajectoryTable read_trajectory_csv(std::istream& is,
                                           const std::string& where) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty trajectory CSV: " + where);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTrajectoryCsvHeader) {
    throw IoError("unexpected trajectory CSV header in " + where);
  }
  TrajectoryTable t;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 5) {
      throw IoError("trajectory CSV row must have 5 columns: " + where);
    }
    t.s.push_back(detail::parse_double(f[0], where));
    t.cost.push_back(detail::parse_double(f[1], where));
    t.field_norm.push_back(detail::parse_double(f[2], where));
    t.sigma_ratio.push_back(detail::parse_double(f[3], where));
    t.x_residual.push_back(detail::parse_double(f[4], where));
  }
  if (t.s.empty()) throw IoError("trajectory CSV has no samples: " + where);
  return t;
}

inline TrajectoryTable read_trajectory_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_trajectory_csv(is, path);
}

}  // namespace gradflow
