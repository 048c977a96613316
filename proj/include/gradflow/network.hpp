#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradflow/errors.hpp"
#include "gradflow/linalg.hpp"

namespace gradflow {

enum class Activation { Tanh, Sigmoid, Softplus, Identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Softplus: return "softplus";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "softplus") return Activation::Softplus;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation: " + s);
}

inline double activate(Activation a, double t) {
  switch (a) {
    case Activation::Tanh:
      return std::tanh(t);
    case Activation::Sigmoid:
      return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                      : std::exp(t) / (1.0 + std::exp(t));
    case Activation::Softplus:
      // log(1+e^t) without overflow for large t
      return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
    case Activation::Identity:
      return t;
  }
  return t;
}

inline double activate_deriv(Activation a, double t) {
  switch (a) {
    case Activation::Tanh: {
      const double y = std::tanh(t);
      return 1.0 - y * y;
    }
    case Activation::Sigmoid: {
      const double y = activate(Activation::Sigmoid, t);
      return y * (1.0 - y);
    }
    case Activation::Softplus:
      return activate(Activation::Sigmoid, t);
    case Activation::Identity:
      return 1.0;
  }
  return 1.0;
}

inline Matrix activate(Activation a, const Matrix& t) {
  return t.unaryExpr([a](double v) { return activate(a, v); });
}

inline Matrix activate_deriv(Activation a, const Matrix& t) {
  return t.unaryExpr([a](double v) { return activate_deriv(a, v); });
}

// Layer widths M_0 .. M_{L+1}; hidden layers get the activation, the final
// affine layer does not.
struct NetworkSpec {
  std::vector<Index> widths;
  Activation activation = Activation::Tanh;

  Index layer_count() const { return static_cast<Index>(widths.size()) - 1; }
  Index input_dim() const { return widths.front(); }
  Index output_dim() const { return widths.back(); }

  Index param_count() const {
    Index k = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      k += widths[l + 1] * widths[l] + widths[l + 1];
    }
    return k;
  }

  void validate() const {
    if (widths.size() < 2) {
      throw InvalidShapeError("network needs at least input and output widths");
    }
    for (Index w : widths) {
      if (w < 1) throw InvalidShapeError("layer widths must be >= 1");
    }
  }
};

// Flat parameter layout: for each layer l = 0..L, the rows*cols entries of W_l
// in row-major order followed by the rows entries of b_l.
inline Index weight_offset(const NetworkSpec& spec, Index layer) {
  Index off = 0;
  for (Index l = 0; l < layer; ++l) {
    off += spec.widths[l + 1] * spec.widths[l] + spec.widths[l + 1];
  }
  return off;
}

inline Index bias_offset(const NetworkSpec& spec, Index layer) {
  return weight_offset(spec, layer) + spec.widths[layer + 1] * spec.widths[layer];
}

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>;

inline RowMajorMap weight_view(const NetworkSpec& spec, const Vector& z,
                               Index layer) {
  return RowMajorMap(z.data() + weight_offset(spec, layer),
                     spec.widths[layer + 1], spec.widths[layer]);
}

inline Eigen::Map<const Vector> bias_view(const NetworkSpec& spec,
                                          const Vector& z, Index layer) {
  return Eigen::Map<const Vector>(z.data() + bias_offset(spec, layer),
                                  spec.widths[layer + 1]);
}

inline Vector pack_params(const NetworkSpec& spec,
                          const std::vector<Matrix>& weights,
                          const std::vector<Vector>& biases) {
  spec.validate();
  const Index lc = spec.layer_count();
  if (static_cast<Index>(weights.size()) != lc ||
      static_cast<Index>(biases.size()) != lc) {
    throw ShapeMismatchError("pack_params: layer count mismatch");
  }
  Vector z(spec.param_count());
  for (Index l = 0; l < lc; ++l) {
    const Matrix& w = weights[l];
    const Vector& b = biases[l];
    if (w.rows() != spec.widths[l + 1] || w.cols() != spec.widths[l]) {
      throw ShapeMismatchError("pack_params: weight shape mismatch");
    }
    if (b.size() != spec.widths[l + 1]) {
      throw ShapeMismatchError("pack_params: bias length mismatch");
    }
    Index idx = weight_offset(spec, l);
    for (Index r = 0; r < w.rows(); ++r) {
      for (Index c = 0; c < w.cols(); ++c) {
        z(idx++) = w(r, c);
      }
    }
    z.segment(bias_offset(spec, l), b.size()) = b;
  }
  return z;
}

inline void require_params(const NetworkSpec& spec, const Vector& z) {
  spec.validate();
  if (z.size() != spec.param_count()) {
    throw ShapeMismatchError("parameter vector has length " +
                             std::to_string(z.size()) + ", expected " +
                             std::to_string(spec.param_count()));
  }
  require_finite(z, "parameter vector");
}

// One column per sample. outputs is square: column i holds the i-th reference
// output, a vector in R^Q. labels are 0-based here; the CSV form is 1-based.
struct TrainingSet {
  Matrix inputs;              // M x N
  Matrix outputs;             // Q x Q
  std::vector<Index> labels;  // size N
  Vector target;              // QN, stacked outputs.col(labels[j])

  Index sample_count() const { return inputs.cols(); }
  Index input_dim() const { return inputs.rows(); }
  Index output_dim() const { return outputs.rows(); }
};

inline TrainingSet make_training_set(Matrix inputs, Matrix outputs,
                                     std::vector<Index> labels) {
  if (inputs.cols() < 1 || inputs.rows() < 1) {
    throw InvalidShapeError("training set needs at least one input sample");
  }
  if (outputs.rows() != outputs.cols() || outputs.rows() < 1) {
    throw InvalidShapeError(
        "reference outputs must form a square block: one vector in R^Q per "
        "class, Q classes");
  }
  if (static_cast<Index>(labels.size()) != inputs.cols()) {
    throw ShapeMismatchError("label count differs from sample count");
  }
  require_finite(inputs, "training inputs");
  require_finite(outputs, "reference outputs");
  const Index q = outputs.rows();
  for (Index i = 0; i < q; ++i) {
    for (Index j = i + 1; j < q; ++j) {
      if (outputs.col(i) == outputs.col(j)) {
        throw InvalidShapeError("reference outputs must be distinct");
      }
    }
  }
  for (Index lab : labels) {
    if (lab < 0 || lab >= q) {
      throw InvalidShapeError("label out of range");
    }
  }
  TrainingSet data;
  data.inputs = std::move(inputs);
  data.outputs = std::move(outputs);
  data.labels = std::move(labels);
  const Index n = data.inputs.cols();
  data.target.resize(q * n);
  for (Index j = 0; j < n; ++j) {
    data.target.segment(j * q, q) = data.outputs.col(data.labels[j]);
  }
  return data;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  for (std::string& s : out) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    s = a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("cannot parse number '" + s + "' in " + where);
  }
}

inline long parse_long(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("cannot parse integer '" + s + "' in " + where);
  }
}

}  // namespace detail

inline void save_training_set(const TrainingSet& data,
                              const std::string& inputs_path,
                              const std::string& outputs_path) {
  const Index m = data.input_dim();
  const Index q = data.output_dim();
  {
    std::ofstream os(inputs_path);
    if (!os) throw IoError("cannot open for writing: " + inputs_path);
    os << "j";
    for (Index c = 0; c < m; ++c) os << ",x_" << c;
    os << ",omega\n";
    for (Index j = 0; j < data.sample_count(); ++j) {
      os << (j + 1);
      for (Index c = 0; c < m; ++c) os << ',' << format_double(data.inputs(c, j));
      os << ',' << (data.labels[j] + 1) << '\n';
    }
    if (!os) throw IoError("write failed: " + inputs_path);
  }
  {
    std::ofstream os(outputs_path);
    if (!os) throw IoError("cannot open for writing: " + outputs_path);
    os << "i";
    for (Index c = 0; c < q; ++c) os << ",y_" << c;
    os << '\n';
    for (Index i = 0; i < q; ++i) {
      os << (i + 1);
      for (Index c = 0; c < q; ++c) os << ',' << format_double(data.outputs(c, i));
      os << '\n';
    }
    if (!os) throw IoError("write failed: " + outputs_path);
  }
}

inline TrainingSet load_training_set(const std::string& inputs_path,
                                     const std::string& outputs_path) {
  std::ifstream in(inputs_path);
  if (!in) throw IoError("cannot open for reading: " + inputs_path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + inputs_path);
  auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header.front() != "j" || header.back() != "omega") {
    throw IoError("inputs CSV header must be j,x_0..x_{M-1},omega: " +
                  inputs_path);
  }
  const Index m = static_cast<Index>(header.size()) - 2;
  std::vector<Vector> rows;
  std::vector<Index> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (static_cast<Index>(f.size()) != m + 2) {
      throw IoError("inputs CSV row has wrong column count: " + inputs_path);
    }
    Vector x(m);
    for (Index c = 0; c < m; ++c) {
      x(c) = detail::parse_double(f[c + 1], inputs_path);
    }
    rows.push_back(std::move(x));
    labels.push_back(detail::parse_long(f.back(), inputs_path) - 1);
  }
  if (rows.empty()) throw IoError("inputs CSV has no data rows: " + inputs_path);

  std::ifstream out(outputs_path);
  if (!out) throw IoError("cannot open for reading: " + outputs_path);
  if (!std::getline(out, line)) throw IoError("empty file: " + outputs_path);
  header = detail::split_csv_line(line);
  if (header.size() < 2 || header.front() != "i") {
    throw IoError("outputs CSV header must be i,y_0..y_{Q-1}: " + outputs_path);
  }
  const Index q = static_cast<Index>(header.size()) - 1;
  std::vector<Vector> yrows;
  while (std::getline(out, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (static_cast<Index>(f.size()) != q + 1) {
      throw IoError("outputs CSV row has wrong column count: " + outputs_path);
    }
    Vector y(q);
    for (Index c = 0; c < q; ++c) {
      y(c) = detail::parse_double(f[c + 1], outputs_path);
    }
    yrows.push_back(std::move(y));
  }
  if (static_cast<Index>(yrows.size()) != q) {
    throw IoError("outputs CSV must hold exactly Q rows of vectors in R^Q: " +
                  outputs_path);
  }

  const Index n = static_cast<Index>(rows.size());
  Matrix inputs(m, n);
  for (Index j = 0; j < n; ++j) inputs.col(j) = rows[j];
  Matrix outputs(q, q);
  for (Index i = 0; i < q; ++i) outputs.col(i) = yrows[i];
  return make_training_set(std::move(inputs), std::move(outputs),
                           std::move(labels));
}

// Per-layer intermediate states of a batched forward pass. act[l] feeds layer
// l (act[0] is the input batch), preact[l] is W_l act[l] + b_l before any
// activation. The network output is preact.back(): the last layer is affine.
struct ForwardTrace {
  std::vector<Matrix> preact;
  std::vector<Matrix> act;

  const Matrix& output() const { return preact.back(); }
};

inline ForwardTrace forward(const NetworkSpec& spec, const Vector& z,
                            const Matrix& inputs) {
  require_params(spec, z);
  if (inputs.rows() != spec.input_dim()) {
    throw ShapeMismatchError("input dimension differs from first layer width");
  }
  require_finite(inputs, "forward inputs");
  const Index lc = spec.layer_count();
  ForwardTrace trace;
  trace.act.reserve(lc);
  trace.preact.reserve(lc);
  trace.act.push_back(inputs);
  for (Index l = 0; l < lc; ++l) {
    Matrix pre = weight_view(spec, z, l) * trace.act.back();
    pre.colwise() += bias_view(spec, z, l);
    if (l + 1 < lc) {
      trace.act.push_back(activate(spec.activation, pre));
    }
    trace.preact.push_back(std::move(pre));
  }
  require_finite(trace.output(), "network output");
  return trace;
}

inline ForwardTrace forward(const NetworkSpec& spec, const Vector& z,
                            const TrainingSet& data) {
  if (spec.output_dim() != data.output_dim()) {
    throw ShapeMismatchError("network output width differs from label dimension");
  }
  return forward(spec, z, data.inputs);
}

// Columns of the Q x N output block stacked into R^{QN}, sample-major.
inline Vector output_vector(const ForwardTrace& trace) {
  const Matrix& out = trace.output();
  return Eigen::Map<const Vector>(out.data(), out.size());
}

inline Vector forward_vector(const NetworkSpec& spec, const Vector& z,
                             const TrainingSet& data) {
  return output_vector(forward(spec, z, data));
}

// Exact derivative of the stacked output map, one Q-row block per sample,
// columns in the flat parameter order. Reverse accumulation: delta holds
// d(output)/d(preact[l]) for the current sample and shrinks layer by layer.
inline Matrix jacobian_from_trace(const NetworkSpec& spec, const Vector& z,
                                  const TrainingSet& data,
                                  const ForwardTrace& trace) {
  const Index lc = spec.layer_count();
  const Index q = spec.output_dim();
  const Index n = data.sample_count();
  const Index k = spec.param_count();
  Matrix d = Matrix::Zero(q * n, k);
  for (Index j = 0; j < n; ++j) {
    Matrix delta = Matrix::Identity(q, q);
    for (Index l = lc - 1; l >= 0; --l) {
      const Index rows_l = spec.widths[l + 1];
      const Index cols_l = spec.widths[l];
      const Index woff = weight_offset(spec, l);
      const Index boff = bias_offset(spec, l);
      const auto a_in = trace.act[l].col(j);
      for (Index r = 0; r < rows_l; ++r) {
        d.block(j * q, woff + r * cols_l, q, cols_l) =
            delta.col(r) * a_in.transpose();
      }
      d.block(j * q, boff, q, rows_l) = delta;
      if (l > 0) {
        const Vector dact =
            activate_deriv(spec.activation, trace.preact[l - 1].col(j));
        delta = (delta * weight_view(spec, z, l)).array().rowwise() *
                dact.transpose().array();
      }
    }
  }
  return d;
}

inline Matrix jacobian(const NetworkSpec& spec, const Vector& z,
                       const TrainingSet& data) {
  return jacobian_from_trace(spec, z, data, forward(spec, z, data));
}

inline double cost(const Vector& x, const Vector& target, Index n) {
  if (x.size() != target.size()) {
    throw ShapeMismatchError("cost: output and target lengths differ");
  }
  if (n < 1) throw InvalidShapeError("cost: sample count must be >= 1");
  return (x - target).squaredNorm() / (2.0 * static_cast<double>(n));
}

inline Vector cost_gradient_x(const Vector& x, const Vector& target, Index n) {
  if (x.size() != target.size()) {
    throw ShapeMismatchError("cost_gradient_x: output and target lengths differ");
  }
  if (n < 1) throw InvalidShapeError("cost_gradient_x: sample count must be >= 1");
  return (x - target) / static_cast<double>(n);
}

// Gradient of the cost in parameter space by plain backpropagation. Kept
// independent of jacobian() so the chain-rule identity against D^T grad_x is
// a real cross-check, not a tautology.
inline Vector cost_gradient_z_from_trace(const NetworkSpec& spec,
                                         const Vector& z,
                                         const TrainingSet& data,
                                         const ForwardTrace& trace) {
  const Index lc = spec.layer_count();
  const Index q = spec.output_dim();
  const Index n = data.sample_count();
  const Vector gx = cost_gradient_x(output_vector(trace), data.target, n);
  Matrix delta = Eigen::Map<const Matrix>(gx.data(), q, n);
  Vector grad(spec.param_count());
  for (Index l = lc - 1; l >= 0; --l) {
    const Index rows_l = spec.widths[l + 1];
    const Index cols_l = spec.widths[l];
    const Matrix gw = delta * trace.act[l].transpose();
    Index idx = weight_offset(spec, l);
    for (Index r = 0; r < rows_l; ++r) {
      for (Index c = 0; c < cols_l; ++c) {
        grad(idx++) = gw(r, c);
      }
    }
    grad.segment(bias_offset(spec, l), rows_l) = delta.rowwise().sum();
    if (l > 0) {
      delta = (weight_view(spec, z, l).transpose() * delta).array() *
              activate_deriv(spec.activation, trace.preact[l - 1]).array();
    }
  }
  return grad;
}

inline Vector cost_gradient_z(const NetworkSpec& spec, const Vector& z,
                              const TrainingSet& data) {
  return cost_gradient_z_from_trace(spec, z, data, forward(spec, z, data));
}

// Uniform entries on [-a, a] with a = 1/sqrt(fan-in), drawn layer by layer,
// weights row-major then biases, so a seed pins the whole vector.
inline Vector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Vector z(spec.param_count());
  Index idx = 0;
  const Index lc = spec.layer_count();
  for (Index l = 0; l < lc; ++l) {
    const double a = 1.0 / std::sqrt(static_cast<double>(spec.widths[l]));
    std::uniform_real_distribution<double> dist(-a, a);
    const Index count = spec.widths[l + 1] * spec.widths[l] + spec.widths[l + 1];
    for (Index i = 0; i < count; ++i) {
      z(idx++) = dist(rng);
    }
  }
  return z;
}

}  // namespace gradflow
