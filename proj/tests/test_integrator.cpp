#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "support.hpp"

using gradflow::Activation;
using gradflow::FlowKind;
using gradflow::Index;
using gradflow::IntegratorConfig;
using gradflow::Matrix;
using gradflow::Method;
using gradflow::NetworkSpec;
using gradflow::StopRule;
using gradflow::Termination;
using gradflow::TrainingSet;
using gradflow::Trajectory;
using gradflow::Vector;

namespace {

Vector scalar(double v) {
  Vector x(1);
  x << v;
  return x;
}

IntegratorConfig rk4_config(double step, double s_max) {
  IntegratorConfig cfg;
  cfg.method = Method::RK4;
  cfg.step = step;
  cfg.s_max = s_max;
  return cfg;
}

TrainingSet scalar_set(double input, double output) {
  Matrix in(1, 1), out(1, 1);
  in << input;
  out << output;
  return gradflow::make_training_set(in, out, {0});
}

}  // namespace

TEST_CASE("stopping time from initial cost and threshold", "[integrator][stop]") {
  CHECK(gradflow::stopping_time(1.0, std::exp(-2.0), 1) ==
        Catch::Approx(1.0).margin(1e-12));
  CHECK(gradflow::stopping_time(1.0, 1e-6, 10) ==
        Catch::Approx(69.07755278982137).margin(1e-10));
  CHECK(gradflow::stopping_time(1.0, 1.0, 4) == 0.0);
  // Threshold above the initial cost clamps at zero.
  CHECK(gradflow::stopping_time(1.0, 2.0, 4) == 0.0);
  CHECK_THROWS_AS(gradflow::stopping_time(0.0, 1e-6, 4),
                  gradflow::NonPositiveError);
  CHECK_THROWS_AS(gradflow::stopping_time(1.0, 0.0, 4),
                  gradflow::NonPositiveError);
  CHECK_THROWS_AS(gradflow::stopping_time(1.0, 1e-6, 0),
                  gradflow::NonPositiveError);
}

TEST_CASE("integrator config validation", "[integrator][config][errors]") {
  IntegratorConfig cfg;
  cfg.step = 0.0;
  CHECK_THROWS_AS(cfg.validate(), gradflow::NonPositiveError);
  cfg = IntegratorConfig{};
  cfg.s_max = -1.0;
  CHECK_THROWS_AS(cfg.validate(), gradflow::NonPositiveError);
  cfg = IntegratorConfig{};
  cfg.rel_tol = 0.0;
  CHECK_THROWS_AS(cfg.validate(), gradflow::NonPositiveError);
  cfg = IntegratorConfig{};
  cfg.sample_every = 0;
  CHECK_THROWS_AS(cfg.validate(), gradflow::NonPositiveError);
  CHECK_THROWS_AS(StopRule::cost_below(0.0).validate(),
                  gradflow::NonPositiveError);
}

TEST_CASE("single fixed steps on the linear test field", "[integrator][steps]") {
  auto f = [](const Vector& y) { return Vector(-y); };
  const Vector y0 = scalar(1.0);
  const double h = 0.3;

  const Vector ye = gradflow::euler_step(f, y0, h);
  CHECK(ye(0) == Catch::Approx(1.0 - h).margin(1e-15));

  // Classical fourth-order multiplier 1 - h + h^2/2 - h^3/6 + h^4/24.
  const double mult =
      1.0 - h + h * h / 2.0 - h * h * h / 6.0 + h * h * h * h / 24.0;
  const Vector yr = gradflow::rk4_step(f, y0, h);
  CHECK(yr(0) == Catch::Approx(mult).margin(1e-15));

  // Zero field leaves the state untouched.
  auto zero = [](const Vector& y) { return Vector(Vector::Zero(y.size())); };
  CHECK(gradflow::rk4_step(zero, y0, h)(0) == 1.0);
}

TEST_CASE("output-space run matches the closed form", "[integrator][comparison]") {
  const Vector x0 = scalar(1.0);
  const Vector target = scalar(0.0);
  const Trajectory traj =
      gradflow::integrate_comparison(x0, target, 1, rk4_config(1e-3, 1.0),
                                     StopRule::time_limit(1.0));
  CHECK(traj.termination == Termination::Stopped);
  const double x_final = traj.final_sample().x(0);
  CHECK(std::abs(x_final - std::exp(-1.0)) < 1e-12);
  CHECK(traj.final_sample().s == Catch::Approx(1.0).margin(1e-12));
  CHECK(traj.total_steps == 1000);

  // Every recorded sample sits on the closed-form orbit.
  for (const gradflow::FlowSample& sample : traj.samples) {
    const Vector cf = gradflow::comparison_closed_form(x0, target, 1, sample.s);
    CHECK(std::abs(sample.x(0) - cf(0)) < 1e-12);
    CHECK(sample.cost == Catch::Approx(0.5 * cf(0) * cf(0)).margin(1e-12));
  }
}

TEST_CASE("fixed-step methods converge at their design orders",
          "[integrator][order]") {
  const Vector x0 = scalar(1.0);
  const Vector target = scalar(0.0);
  const double exact = std::exp(-1.0);

  auto final_error = [&](Method m, double h) {
    IntegratorConfig cfg;
    cfg.method = m;
    cfg.step = h;
    cfg.s_max = 1.0;
    const Trajectory traj = gradflow::integrate_comparison(
        x0, target, 1, cfg, StopRule::time_limit(1.0));
    return std::abs(traj.final_sample().x(0) - exact);
  };

  const double rk4_ratio =
      final_error(Method::RK4, 0.1) / final_error(Method::RK4, 0.05);
  CHECK(std::log2(rk4_ratio) > 3.5);
  CHECK(std::log2(rk4_ratio) < 4.5);

  const double euler_ratio =
      final_error(Method::Euler, 0.01) / final_error(Method::Euler, 0.005);
  CHECK(std::log2(euler_ratio) > 0.8);
  CHECK(std::log2(euler_ratio) < 1.2);
}

TEST_CASE("adaptive method honors its tolerances", "[integrator][adaptive]") {
  Vector x0(3), target(3);
  x0 << 1.0, -2.0, 0.5;
  target << 0.0, 1.0, 0.0;
  IntegratorConfig cfg;
  cfg.method = Method::AdaptiveRK45;
  cfg.step = 1e-3;
  cfg.s_max = 5.0;
  cfg.abs_tol = 1e-10;
  cfg.rel_tol = 1e-10;
  const Trajectory traj = gradflow::integrate_comparison(
      x0, target, 3, cfg, StopRule::time_limit(5.0));
  CHECK(traj.termination == Termination::Stopped);
  const Vector cf = gradflow::comparison_closed_form(x0, target, 3, 5.0);
  CHECK((traj.final_sample().x - cf).norm() < 1e-8);
  // The controller grows the step: far fewer accepted steps than 5.0/1e-3.
  CHECK(traj.total_steps < 500);
}

TEST_CASE("time-limit stop hits the target time exactly",
          "[integrator][stop]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(0.4, 10.0),
      StopRule::time_limit(1.0));
  CHECK(traj.termination == Termination::Stopped);
  CHECK(traj.final_sample().s == Catch::Approx(1.0).margin(1e-12));
  CHECK(traj.total_steps == 3);  // 0.4 + 0.4 + 0.2
}

TEST_CASE("cost threshold stop fires on the first crossing",
          "[integrator][stop]") {
  // C(s) = e^{-2s}/2 falls below 0.01 at s = ln(50)/2, about 1.956.
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(0.1, 10.0),
      StopRule::cost_below(0.01));
  CHECK(traj.termination == Termination::Stopped);
  CHECK(traj.final_sample().cost <= 0.01);
  CHECK(traj.final_sample().s == Catch::Approx(2.0).margin(1e-12));
  // One step earlier the cost was still above the threshold.
  const auto& sa = traj.samples;
  REQUIRE(sa.size() >= 2);
  CHECK(sa[sa.size() - 2].cost > 0.01);
}

TEST_CASE("field-norm stop fires when the flow flattens", "[integrator][stop]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(0.1, 50.0),
      StopRule::field_norm_below(0.1));
  CHECK(traj.termination == Termination::Stopped);
  CHECK(traj.final_sample().field_norm <= 0.1);
  CHECK(traj.final_sample().s == Catch::Approx(2.4).margin(1e-12));
}

TEST_CASE("formula stop lands on the predicted time with terminal cost at eps",
          "[integrator][stop]") {
  const double c0 = 0.5;
  const double eps = 5e-3;
  const double s0 = gradflow::stopping_time(c0, eps, 1);
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(1e-2, 100.0),
      StopRule::stopping_time_formula(eps));
  CHECK(traj.termination == Termination::Stopped);
  CHECK(traj.final_sample().s == Catch::Approx(s0).margin(1e-9));
  CHECK(traj.final_sample().cost == Catch::Approx(eps).epsilon(1e-6));
}

TEST_CASE("formula stop with threshold already met records a single state",
          "[integrator][stop]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(0.0), scalar(0.0), 1, rk4_config(1e-2, 10.0),
      StopRule::stopping_time_formula(1e-8));
  CHECK(traj.termination == Termination::Stopped);
  CHECK(traj.samples.size() == 1);
  CHECK(traj.final_sample().s == 0.0);
  CHECK(traj.final_sample().cost == 0.0);
}

TEST_CASE("time cap without a fired rule reports a completed run",
          "[integrator][stop]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(0.1, 1.0),
      StopRule::field_norm_below(1e-300));
  CHECK(traj.termination == Termination::Completed);
  CHECK(traj.final_sample().s == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("parameter-space run with constant derivative matches the scalar ODE",
          "[integrator][flows]") {
  // widths 1-1 at input 1: derivative row (1, 1) for every z, so the plain
  // flow obeys dx/ds = -2x and the modified flow dx/ds = -x exactly.
  const NetworkSpec spec = testsupport::make_spec({1, 1}, Activation::Tanh);
  Vector z0(2);
  z0 << 2.0, 0.0;
  const TrainingSet data = scalar_set(1.0, 0.0);

  const Trajectory std_traj =
      gradflow::integrate(FlowKind::Standard, spec, data, z0,
                          rk4_config(1e-3, 1.0), StopRule::time_limit(1.0));
  CHECK(std_traj.termination == Termination::Stopped);
  CHECK(std::abs(std_traj.final_sample().x(0) - 2.0 * std::exp(-2.0)) < 1e-9);

  const Trajectory mod_traj =
      gradflow::integrate(FlowKind::OverparamModified, spec, data, z0,
                          rk4_config(1e-3, 1.0), StopRule::time_limit(1.0));
  CHECK(mod_traj.termination == Termination::Stopped);
  CHECK(std::abs(mod_traj.final_sample().x(0) - 2.0 * std::exp(-1.0)) < 1e-9);
  CHECK(mod_traj.final_sample().rank.numerical_rank == 1);
  CHECK(mod_traj.final_sample().sigma_ratio == 1.0);
  // z is recorded for parameter-space runs.
  CHECK(mod_traj.final_sample().z.size() == 2);
}

TEST_CASE("comparison kind builds its start state from the network",
          "[integrator][flows]") {
  const NetworkSpec spec = testsupport::make_spec({1, 1}, Activation::Tanh);
  Vector z0(2);
  z0 << 2.0, 0.0;
  const TrainingSet data = scalar_set(1.0, 0.0);
  const Trajectory traj =
      gradflow::integrate(FlowKind::ComparisonModel, spec, data, z0,
                          rk4_config(1e-3, 1.0), StopRule::time_limit(1.0));
  // Initial state is the network output x = 2, and z is never recorded.
  CHECK(traj.samples.front().x(0) == Catch::Approx(2.0).margin(1e-15));
  CHECK(traj.samples.front().z.size() == 0);
  CHECK(std::abs(traj.final_sample().x(0) - 2.0 * std::exp(-1.0)) < 1e-9);
}

TEST_CASE("inadmissible kind and shape mismatches are rejected",
          "[integrator][errors]") {
  const NetworkSpec spec = testsupport::make_spec({1, 1}, Activation::Tanh);
  Vector z0(2);
  z0 << 2.0, 0.0;
  Matrix inputs(1, 3);
  inputs << 1.0, 2.0, 3.0;
  Matrix outputs(1, 1);
  outputs << 0.0;
  const TrainingSet data =
      gradflow::make_training_set(inputs, outputs, {0, 0, 0});
  // K = 2 < QN = 3: the right-inverse flow is undefined.
  CHECK_THROWS_AS(
      gradflow::integrate(FlowKind::OverparamModified, spec, data, z0,
                          rk4_config(0.1, 1.0), StopRule::time_limit(1.0)),
      gradflow::InvalidShapeError);
  CHECK_THROWS_AS(
      gradflow::integrate(FlowKind::BorderlineModified, spec, data, z0,
                          rk4_config(0.1, 1.0), StopRule::time_limit(1.0)),
      gradflow::InvalidShapeError);
  CHECK_THROWS_AS(
      gradflow::integrate(FlowKind::Standard, spec, data, Vector::Zero(5),
                          rk4_config(0.1, 1.0), StopRule::time_limit(1.0)),
      gradflow::ShapeMismatchError);
}

TEST_CASE("rank loss at the start is recorded and terminates the run",
          "[integrator][rankloss]") {
  // Duplicate inputs make the derivative rows identical: rank 1 < K = 2.
  const NetworkSpec spec = testsupport::make_spec({1, 1}, Activation::Tanh);
  Vector z0(2);
  z0 << 2.0, 0.0;
  Matrix inputs(1, 3);
  inputs << 1.0, 1.0, 1.0;
  Matrix outputs(1, 1);
  outputs << 0.5;
  const TrainingSet data =
      gradflow::make_training_set(inputs, outputs, {0, 0, 0});

  const Trajectory traj =
      gradflow::integrate(FlowKind::UnderparamModified, spec, data, z0,
                          rk4_config(0.1, 1.0), StopRule::time_limit(1.0));
  CHECK(traj.termination == Termination::RankLost);
  CHECK(traj.rank_lost_s == 0.0);
  CHECK(traj.rank_lost_report.numerical_rank == 1);
  REQUIRE(traj.samples.size() == 1);
  CHECK(std::isnan(traj.samples.front().field_norm));
  CHECK(traj.samples.front().cost > 0.0);
}

TEST_CASE("adaptive trials that leave the full-rank region are rejected, "
          "not fatal",
          "[integrator][rankloss]") {
  // At this instance the initial state is healthy (condition ~ 2.8e3) but the
  // field is large, so early long trial steps land in saturated territory
  // where the derivative loses column rank. Those trials must be rejected
  // with a shorter step instead of ending the run at s = 0; the orbit then
  // advances until the boundary of the full-rank region genuinely stops it.
  const NetworkSpec spec = testsupport::make_spec({2, 2, 2}, Activation::Tanh);
  const TrainingSet data = gradflow::generate_dataset(
      2, 2, 8, gradflow::DataLaw::GaussianInputs, 3001);
  const Vector z0 = gradflow::init_params(spec, 4001);

  IntegratorConfig cfg;
  cfg.method = Method::AdaptiveRK45;
  cfg.step = 0.08;
  cfg.s_max = 20000.0;
  const Trajectory traj =
      gradflow::integrate(FlowKind::UnderparamModified, spec, data, z0, cfg,
                          StopRule::field_norm_below(1e-10));

  CHECK(traj.samples.front().sigma_ratio > 1e-6);
  CHECK(traj.final_sample().s > 0.5);
  CHECK(traj.total_steps > 50);
  CHECK(traj.rejected_steps > 0);
  // The orbit ends at the rank boundary: either the state itself degenerates
  // or no acceptable step length remains.
  const bool boundary = traj.termination == Termination::RankLost ||
                        traj.termination == Termination::StepUnderflow;
  CHECK(boundary);
}

TEST_CASE("sample decimation keeps the first and final states",
          "[integrator][sampling]") {
  IntegratorConfig cfg = rk4_config(0.1, 10.0);
  cfg.sample_every = 3;
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, cfg, StopRule::time_limit(1.0));
  REQUIRE(traj.samples.size() == 5);
  CHECK(traj.samples[0].s == 0.0);
  CHECK(traj.samples[1].s == Catch::Approx(0.3).margin(1e-12));
  CHECK(traj.samples[2].s == Catch::Approx(0.6).margin(1e-12));
  CHECK(traj.samples[3].s == Catch::Approx(0.9).margin(1e-12));
  CHECK(traj.samples[4].s == Catch::Approx(1.0).margin(1e-12));
  CHECK(traj.sample_every == 3);
}

TEST_CASE("repeated runs are bit identical", "[integrator][determinism]") {
  const NetworkSpec spec = testsupport::make_spec({1, 3, 1}, Activation::Tanh);
  const TrainingSet data = gradflow::generate_dataset(
      1, 1, 2, gradflow::DataLaw::GaussianInputs, 7);
  const Vector z0 = gradflow::init_params(spec, 8);
  auto run = [&] {
    return gradflow::integrate(FlowKind::OverparamModified, spec, data, z0,
                               rk4_config(0.02, 5.0), StopRule::time_limit(2.0));
  };
  const Trajectory a = run();
  const Trajectory b = run();
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK((a.samples[i].z - b.samples[i].z).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.samples[i].cost == b.samples[i].cost);
    CHECK(a.samples[i].s == b.samples[i].s);
  }
}

TEST_CASE("trajectory CSV round-trip preserves every bit",
          "[integrator][io]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(1.0), scalar(0.0), 1, rk4_config(0.1, 10.0),
      StopRule::time_limit(1.0));
  std::ostringstream os;
  gradflow::write_trajectory_csv(os, traj);
  std::istringstream is(os.str());
  const gradflow::TrajectoryTable table =
      gradflow::read_trajectory_csv(is, "roundtrip");
  REQUIRE(table.size() == traj.samples.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    CHECK(table.s[i] == traj.samples[i].s);
    CHECK(table.cost[i] == traj.samples[i].cost);
    CHECK(table.field_norm[i] == traj.samples[i].field_norm);
    CHECK(table.sigma_ratio[i] == traj.samples[i].sigma_ratio);
    CHECK(table.x_residual[i] == traj.samples[i].x_residual);
  }

  std::istringstream bad("wrong,header\n1,2\n");
  CHECK_THROWS_AS(gradflow::read_trajectory_csv(bad, "bad"), gradflow::IoError);
}

TEST_CASE("table view mirrors the recorded samples", "[integrator][io]") {
  const Trajectory traj = gradflow::integrate_comparison(
      scalar(2.0), scalar(1.0), 1, rk4_config(0.25, 10.0),
      StopRule::time_limit(1.0));
  const gradflow::TrajectoryTable table = gradflow::to_table(traj);
  REQUIRE(table.size() == traj.samples.size());
  CHECK(table.x_residual.front() == Catch::Approx(1.0).margin(1e-15));
}
