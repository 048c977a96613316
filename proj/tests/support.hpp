#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "gradflow/gradflow.hpp"

namespace testsupport {

using gradflow::Index;
using gradflow::Matrix;
using gradflow::Vector;

inline Matrix random_gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) {
      a(i, j) = normal(rng);
    }
  }
  return a;
}

inline Matrix random_orthogonal(Index n, std::mt19937_64& rng) {
  const Matrix a = random_gaussian(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ() * Matrix::Identity(n, n);
}

// U diag(sigma) V^T with orthonormal factors and log-spaced singular values
// running from 1 down to 1/cond, so the condition number is chosen exactly.
inline Matrix random_matrix_with_cond(Index rows, Index cols, double cond,
                                      std::mt19937_64& rng) {
  const Index r = std::min(rows, cols);
  const Matrix u = random_orthogonal(rows, rng).leftCols(r);
  const Matrix v = random_orthogonal(cols, rng).leftCols(r);
  Vector sigma(r);
  for (Index i = 0; i < r; ++i) {
    sigma(i) = r > 1 ? std::pow(cond, -static_cast<double>(i) /
                                          static_cast<double>(r - 1))
                     : 1.0;
  }
  return u * sigma.asDiagonal() * v.transpose();
}

inline Vector stacked_output(const gradflow::NetworkSpec& spec, const Vector& z,
                             const gradflow::TrainingSet& data) {
  return gradflow::forward_vector(spec, z, data);
}

// Central finite differences of the stacked output map, one parameter at a
// time, with the per-coordinate step 1e-6 (1 + |z_i|).
inline Matrix fd_jacobian(const gradflow::NetworkSpec& spec, const Vector& z,
                          const gradflow::TrainingSet& data,
                          double base_step = 1e-6) {
  const Index k = spec.param_count();
  const Index qn = spec.output_dim() * data.sample_count();
  Matrix d(qn, k);
  for (Index i = 0; i < k; ++i) {
    const double h = base_step * (1.0 + std::abs(z(i)));
    Vector zp = z;
    Vector zm = z;
    zp(i) += h;
    zm(i) -= h;
    d.col(i) = (stacked_output(spec, zp, data) - stacked_output(spec, zm, data)) /
               (2.0 * h);
  }
  return d;
}

inline Vector fd_cost_gradient(const gradflow::NetworkSpec& spec, const Vector& z,
                               const gradflow::TrainingSet& data,
                               double base_step = 1e-6) {
  const Index k = spec.param_count();
  const Index n = data.sample_count();
  Vector g(k);
  for (Index i = 0; i < k; ++i) {
    const double h = base_step * (1.0 + std::abs(z(i)));
    Vector zp = z;
    Vector zm = z;
    zp(i) += h;
    zm(i) -= h;
    const double cp =
        gradflow::cost(stacked_output(spec, zp, data), data.target, n);
    const double cm =
        gradflow::cost(stacked_output(spec, zm, data), data.target, n);
    g(i) = (cp - cm) / (2.0 * h);
  }
  return g;
}

// Textbook right/left inverses by explicit Gram inversion; the production
// code goes through the SVD instead, so these act as independent oracles.
inline Matrix explicit_right_inverse(const Matrix& d) {
  return d.transpose() * (d * d.transpose()).inverse();
}

inline Matrix explicit_left_inverse(const Matrix& d) {
  return (d.transpose() * d).inverse() * d.transpose();
}

inline Matrix explicit_projector_range_d(const Matrix& d) {
  return d * (d.transpose() * d).inverse() * d.transpose();
}

inline gradflow::NetworkSpec make_spec(std::vector<Index> widths,
                                       gradflow::Activation act) {
  gradflow::NetworkSpec spec;
  spec.widths = std::move(widths);
  spec.activation = act;
  return spec;
}

inline gradflow::TrainingSet random_training_set(Index m, Index q, Index n,
                                                 std::mt19937_64& rng) {
  return gradflow::generate_dataset(m, q, n, gradflow::DataLaw::GaussianInputs,
                                    rng());
}

inline std::string make_temp_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  std::string tmpl =
      (fs::temp_directory_path() / ("gradflow-" + tag + "-XXXXXX")).string();
  if (!mkdtemp(tmpl.data())) {
    throw std::runtime_error("mkdtemp failed for " + tmpl);
  }
  return tmpl;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

struct CliResult {
  int exit_code = -1;
  std::string output;
};

inline const char* cli_path() {
  const char* exe = std::getenv("GRADFLOW_CLI");
  if (!exe) {
    throw std::runtime_error(
        "GRADFLOW_CLI is not set; run through ctest or export the CLI path");
  }
  return exe;
}

inline std::string config_dir() {
  const char* dir = std::getenv("GRADFLOW_CONFIG_DIR");
  if (!dir) {
    throw std::runtime_error("GRADFLOW_CONFIG_DIR is not set");
  }
  return dir;
}

inline CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + cli_path() + "\" " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed for: " + cmd);
  CliResult result;
  char buf[4096];
  std::size_t got = 0;
  while ((got = std::fread(buf, 1, sizeof(buf), pipe)) > 0) {
    result.output.append(buf, got);
  }
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

}  // namespace testsupport
