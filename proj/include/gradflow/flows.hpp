#pragma once

#include <cmath>
#include <string>

#include "gradflow/errors.hpp"
#include "gradflow/linalg.hpp"
#include "gradflow/network.hpp"

namespace gradflow {

// BorderlineModified is the square-system variant reached only through "auto"
// selection at K = QN: it solves D v = -grad_x C with a plain LU factorization.
// The explicit Overparam/Underparam kinds keep their own factorization routes
// at every admissible size, so their agreement on square systems stays a
// meaningful cross-check.
enum class FlowKind {
  Standard,
  OverparamModified,
  UnderparamModified,
  BorderlineModified,
  ComparisonModel,
};

inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::Standard: return "standard";
    case FlowKind::OverparamModified: return "overparam-modified";
    case FlowKind::UnderparamModified: return "underparam-modified";
    case FlowKind::BorderlineModified: return "borderline-modified";
    case FlowKind::ComparisonModel: return "comparison-model";
  }
  return "?";
}

inline FlowKind flow_kind_from_string(const std::string& s) {
  if (s == "standard") return FlowKind::Standard;
  if (s == "overparam-modified" || s == "overparam") return FlowKind::OverparamModified;
  if (s == "underparam-modified" || s == "underparam") return FlowKind::UnderparamModified;
  if (s == "borderline-modified" || s == "borderline") return FlowKind::BorderlineModified;
  if (s == "comparison-model" || s == "comparison") return FlowKind::ComparisonModel;
  throw ConfigError("unknown flow kind: " + s);
}

inline bool kind_admissible(FlowKind kind, Index k, Index qn) {
  switch (kind) {
    case FlowKind::Standard:
    case FlowKind::ComparisonModel:
      return true;
    case FlowKind::OverparamModified:
      return k >= qn;
    case FlowKind::UnderparamModified:
      return k <= qn;
    case FlowKind::BorderlineModified:
      return k == qn;
  }
  return false;
}

inline FlowKind resolve_auto_flow(Index k, Index qn) {
  if (k > qn) return FlowKind::OverparamModified;
  if (k < qn) return FlowKind::UnderparamModified;
  return FlowKind::BorderlineModified;
}

struct FieldEval {
  Vector v;
  RankReport rank;
};

// Minimal-norm solution of D v = -g for wide full-row-rank D, via the SVD:
// v = -V diag(1/s) U^T g. Same vector as -D^T (D D^T)^{-1} g without squaring
// the condition number.
inline FieldEval field_overparam(const Matrix& d, const Vector& gx,
                                 double tol_rel = kDefaultRankTol) {
  if (gx.size() != d.rows()) {
    throw ShapeMismatchError("field_overparam: gradient length differs from row count");
  }
  if (d.cols() < d.rows()) {
    throw ShapeMismatchError(
        "field_overparam: needs at least as many parameters as output coordinates");
  }
  const Svd dec = svd(d);
  RankReport rep = make_rank_report(dec.s, tol_rel);
  if (rep.numerical_rank < d.rows()) {
    throw RankDeficientError("field_overparam: derivative lost row rank", rep);
  }
  Vector w = dec.u.transpose() * gx;
  w.array() /= dec.s.array();
  return FieldEval{-(dec.v * w), std::move(rep)};
}

// Least-squares solution of D v = -g for tall full-column-rank D, equal to
// -(D^T D)^{-1} D^T g. The solve goes through a column-pivoted QR of D itself.
inline FieldEval field_underparam(const Matrix& d, const Vector& gx,
                                  double tol_rel = kDefaultRankTol) {
  if (gx.size() != d.rows()) {
    throw ShapeMismatchError("field_underparam: gradient length differs from row count");
  }
  if (d.cols() > d.rows()) {
    throw ShapeMismatchError(
        "field_underparam: needs at most as many parameters as output coordinates");
  }
  RankReport rep = numerical_rank(d, tol_rel);
  if (rep.numerical_rank < d.cols()) {
    throw RankDeficientError("field_underparam: derivative lost column rank", rep);
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(d);
  return FieldEval{qr.solve(-gx), std::move(rep)};
}

// Square-system route: plain LU solve of D v = -g, valid only at K = QN.
inline FieldEval field_borderline(const Matrix& d, const Vector& gx,
                                  double tol_rel = kDefaultRankTol) {
  if (d.rows() != d.cols()) {
    throw ShapeMismatchError("field_borderline: derivative must be square");
  }
  if (gx.size() != d.rows()) {
    throw ShapeMismatchError("field_borderline: gradient length differs from row count");
  }
  RankReport rep = numerical_rank(d, tol_rel);
  if (rep.numerical_rank < d.rows()) {
    throw RankDeficientError("field_borderline: derivative is numerically singular", rep);
  }
  Eigen::PartialPivLU<Matrix> lu(d);
  return FieldEval{lu.solve(-gx), std::move(rep)};
}

inline Vector field_standard(const NetworkSpec& spec, const Vector& z,
                             const TrainingSet& data) {
  return -cost_gradient_z(spec, z, data);
}

inline FieldEval field_overparam(const NetworkSpec& spec, const Vector& z,
                                 const TrainingSet& data,
                                 double tol_rel = kDefaultRankTol) {
  const ForwardTrace trace = forward(spec, z, data);
  const Matrix d = jacobian_from_trace(spec, z, data, trace);
  const Vector gx =
      cost_gradient_x(output_vector(trace), data.target, data.sample_count());
  return field_overparam(d, gx, tol_rel);
}

inline FieldEval field_underparam(const NetworkSpec& spec, const Vector& z,
                                  const TrainingSet& data,
                                  double tol_rel = kDefaultRankTol) {
  const ForwardTrace trace = forward(spec, z, data);
  const Matrix d = jacobian_from_trace(spec, z, data, trace);
  const Vector gx =
      cost_gradient_x(output_vector(trace), data.target, data.sample_count());
  return field_underparam(d, gx, tol_rel);
}

inline FieldEval field_borderline(const NetworkSpec& spec, const Vector& z,
                                  const TrainingSet& data,
                                  double tol_rel = kDefaultRankTol) {
  const ForwardTrace trace = forward(spec, z, data);
  const Matrix d = jacobian_from_trace(spec, z, data, trace);
  const Vector gx =
      cost_gradient_x(output_vector(trace), data.target, data.sample_count());
  return field_borderline(d, gx, tol_rel);
}

inline Vector field_comparison(const Vector& x, const Vector& target, Index n) {
  return -cost_gradient_x(x, target, n);
}

inline Vector comparison_closed_form(const Vector& x0, const Vector& target,
                                     Index n, double s) {
  if (x0.size() != target.size()) {
    throw ShapeMismatchError("comparison_closed_form: lengths differ");
  }
  const double decay = std::exp(-s / static_cast<double>(n));
  return target + decay * (x0 - target);
}

inline double metric_h(const NetworkSpec& spec, const Vector& z,
                       const TrainingSet& data, const Vector& v,
                       const Vector& w) {
  if (v.size() != spec.param_count() || w.size() != spec.param_count()) {
    throw ShapeMismatchError("metric_h: direction length differs from parameter count");
  }
  require_finite(v, "metric_h direction v");
  require_finite(w, "metric_h direction w");
  const Matrix d = jacobian(spec, z, data);
  return (d * v).dot(d * w);
}

inline Matrix metric_g(const NetworkSpec& spec, const Vector& z,
                       const TrainingSet& data) {
  const Matrix d = jacobian(spec, z, data);
  return d.transpose() * d;
}

inline Matrix pushforward_metric_standard(const NetworkSpec& spec,
                                          const Vector& z,
                                          const TrainingSet& data) {
  const Matrix d = jacobian(spec, z, data);
  return d * d.transpose();
}

}  // namespace gradflow
