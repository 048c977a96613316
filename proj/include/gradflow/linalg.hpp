#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gradflow/errors.hpp"

namespace gradflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Relative cutoff for counting singular values as nonzero.
inline constexpr double kDefaultRankTol = 1e-10;
// sigma_min/sigma_max below this flags the factorization as close to losing rank.
inline constexpr double kNearRankLossRatio = 1e-8;

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw NonFiniteError(std::string(what) + " contains a non-finite entry");
  }
}

struct RankReport {
  Vector singular_values;  // nonincreasing
  Index numerical_rank = 0;
  double tolerance_used = 0.0;  // absolute cutoff tol_rel * sigma_max
  double condition_estimate = 0.0;  // sigma_max / sigma_r over the retained block; 0 when rank is 0

  double sigma_max() const {
    return singular_values.size() > 0 ? singular_values(0) : 0.0;
  }

  double sigma_min_over_max() const {
    if (singular_values.size() == 0 || singular_values(0) <= 0.0) return 0.0;
    return singular_values(singular_values.size() - 1) / singular_values(0);
  }

  bool near_rank_loss() const { return sigma_min_over_max() < kNearRankLossRatio; }
};

struct RankDeficientError : Error {
  RankReport report;
  RankDeficientError(const std::string& msg, RankReport r)
      : Error(msg), report(std::move(r)) {}
};

struct Svd {
  Matrix u;  // m x r thin factor
  Vector s;  // r = min(m, n), nonincreasing
  Matrix v;  // n x r thin factor
};

inline Svd svd(const Matrix& a) {
  require_finite(a, "svd input");
  Eigen::JacobiSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) {
    throw NoConvergenceError("singular value decomposition did not converge");
  }
  return Svd{dec.matrixU(), dec.singularValues(), dec.matrixV()};
}

inline Index rank_from_singular_values(const Vector& s, double tol_rel) {
  if (s.size() == 0) return 0;
  const double cut = tol_rel * s(0);
  Index r = 0;
  for (Index i = 0; i < s.size(); ++i) {
    if (s(i) > cut) ++r;
  }
  return r;
}

inline RankReport make_rank_report(const Vector& s, double tol_rel) {
  if (tol_rel <= 0.0) {
    throw NonPositiveError("rank tolerance must be positive");
  }
  RankReport rep;
  rep.singular_values = s;
  rep.tolerance_used = s.size() > 0 ? tol_rel * s(0) : 0.0;
  rep.numerical_rank = rank_from_singular_values(s, tol_rel);
  rep.condition_estimate =
      rep.numerical_rank > 0 ? s(0) / s(rep.numerical_rank - 1) : 0.0;
  return rep;
}

inline RankReport numerical_rank(const Matrix& a, double tol_rel = kDefaultRankTol) {
  return make_rank_report(svd(a).s, tol_rel);
}

// Right inverse A^T (A A^T)^{-1} of a full-row-rank matrix, formed from the SVD
// so no Gram matrix is squared up. Throws RankDeficientError when the numerical
// rank at tol_rel falls short of the row count.
inline Matrix penrose_inverse(const Matrix& a, double tol_rel = kDefaultRankTol) {
  const Svd dec = svd(a);
  RankReport rep = make_rank_report(dec.s, tol_rel);
  if (rep.numerical_rank < a.rows()) {
    throw RankDeficientError("penrose_inverse: matrix has deficient row rank", rep);
  }
  return dec.v * dec.s.cwiseInverse().asDiagonal() * dec.u.transpose();
}

// Orthogonal projector onto range(A^T) = row space of A; requires full row rank.
inline Matrix projector_range_dt(const Matrix& a, double tol_rel = kDefaultRankTol) {
  const Svd dec = svd(a);
  RankReport rep = make_rank_report(dec.s, tol_rel);
  if (rep.numerical_rank < a.rows()) {
    throw RankDeficientError("projector_range_dt: matrix has deficient row rank", rep);
  }
  return dec.v * dec.v.transpose();
}

// Orthogonal projector onto range(A) = column space of A; requires full column rank.
inline Matrix projector_range_d(const Matrix& a, double tol_rel = kDefaultRankTol) {
  const Svd dec = svd(a);
  RankReport rep = make_rank_report(dec.s, tol_rel);
  if (rep.numerical_rank < a.cols()) {
    throw RankDeficientError("projector_range_d: matrix has deficient column rank", rep);
  }
  return dec.u * dec.u.transpose();
}

// 17 significant digits round-trip an IEEE double exactly.
inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

inline void write_matrix_text(std::ostream& os, const Matrix& a) {
  os << a.rows() << ' ' << a.cols() << '\n';
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      if (j > 0) os << ' ';
      os << format_double(a(i, j));
    }
    os << '\n';
  }
}

inline void write_matrix_text(const std::string& path, const Matrix& a) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_matrix_text(os, a);
  if (!os) throw IoError("write failed: " + path);
}

inline Matrix read_matrix_text(std::istream& is) {
  Index rows = 0, cols = 0;
  if (!(is >> rows >> cols)) {
    throw IoError("matrix text: malformed header line");
  }
  if (rows < 0 || cols < 0) {
    throw IoError("matrix text: negative dimensions in header");
  }
  Matrix a(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      if (!(is >> a(i, j))) {
        throw IoError("matrix text: truncated entry block");
      }
    }
  }
  return a;
}

inline Matrix read_matrix_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_matrix_text(is);
}

}  // namespace gradflow
