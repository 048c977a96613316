#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradflow/diagnostics.hpp"
#include "gradflow/errors.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/integrator.hpp"
#include "gradflow/linalg.hpp"
#include "gradflow/network.hpp"

namespace gradflow {

inline constexpr const char* kLibraryVersion = "0.1.0";

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

enum class DataLaw { GaussianInputs, GridInputs };

inline std::string to_string(DataLaw law) {
  return law == DataLaw::GaussianInputs ? "gaussian" : "grid";
}

inline DataLaw data_law_from_string(const std::string& s) {
  if (s == "gaussian") return DataLaw::GaussianInputs;
  if (s == "grid") return DataLaw::GridInputs;
  throw ConfigError("unknown dataset law: " + s);
}

// N inputs in R^m, q distinct reference outputs in R^q, and a surjective
// label map: the first q samples take labels 0..q-1, the rest are uniform.
// Draw order is inputs, then outputs, then labels, so a seed pins all bytes.
inline TrainingSet generate_dataset(Index m, Index q, Index n, DataLaw law,
                                    std::uint64_t seed) {
  if (m < 1 || q < 1 || n < 1) {
    throw InvalidShapeError("generate_dataset: dimensions must be >= 1");
  }
  if (q > n) {
    throw InvalidShapeError(
        "generate_dataset: needs at least as many samples as classes");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix inputs(m, n);
  if (law == DataLaw::GaussianInputs) {
    for (Index j = 0; j < n; ++j) {
      for (Index i = 0; i < m; ++i) {
        inputs(i, j) = normal(rng);
      }
    }
  } else {
    // Smallest lattice base b with b^m >= n covers the points in [-1,1]^m.
    Index base = 1;
    while (std::pow(static_cast<double>(base), static_cast<double>(m)) <
           static_cast<double>(n)) {
      ++base;
    }
    for (Index j = 0; j < n; ++j) {
      Index digits = j;
      for (Index i = 0; i < m; ++i) {
        const Index digit = digits % base;
        digits /= base;
        inputs(i, j) =
            base > 1 ? -1.0 + 2.0 * static_cast<double>(digit) /
                                  static_cast<double>(base - 1)
                     : 0.0;
      }
    }
  }

  Matrix outputs(q, q);
  for (Index i = 0; i < q; ++i) {
    while (true) {
      Vector y(q);
      for (Index c = 0; c < q; ++c) y(c) = normal(rng);
      bool distinct = true;
      for (Index prev = 0; prev < i; ++prev) {
        if ((outputs.col(prev) - y).norm() < 1e-6) {
          distinct = false;
          break;
        }
      }
      if (distinct) {
        outputs.col(i) = y;
        break;
      }
    }
  }

  std::vector<Index> labels(static_cast<std::size_t>(n));
  for (Index j = 0; j < q; ++j) labels[static_cast<std::size_t>(j)] = j;
  if (n > q) {
    std::uniform_int_distribution<Index> pick(0, q - 1);
    for (Index j = q; j < n; ++j) labels[static_cast<std::size_t>(j)] = pick(rng);
  }
  return make_training_set(std::move(inputs), std::move(outputs), std::move(labels));
}

struct DatasetConfig {
  bool synthetic = true;
  DataLaw law = DataLaw::GaussianInputs;
  Index n = 4;
  std::string inputs_csv;
  std::string outputs_csv;
};

struct FlowSelection {
  bool auto_kind = true;
  FlowKind kind = FlowKind::Standard;

  std::string label() const { return auto_kind ? "auto" : to_string(kind); }
};

struct RunConfig {
  NetworkSpec network;
  DatasetConfig dataset;
  std::vector<FlowSelection> flows{FlowSelection{}};
  double rank_tol = kDefaultRankTol;
  IntegratorConfig integrator;
  bool step_set = false;
  bool s_max_set = false;
  StopRule stop;
  bool stop_set = false;
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  void validate() const {
    network.validate();
    if (flows.empty()) throw ConfigError("at least one flow kind is required");
    if (!(rank_tol > 0.0)) throw ConfigError("rank_tol must be positive");
    if (!dataset.synthetic &&
        (dataset.inputs_csv.empty() || dataset.outputs_csv.empty())) {
      throw ConfigError("file-backed dataset needs inputs and outputs paths");
    }
    if (dataset.synthetic && dataset.n < 1) {
      throw ConfigError("dataset sample count must be >= 1");
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  const auto b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline double config_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse number for " + key + ": '" + v + "'");
  }
}

inline long long config_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse integer for " + key + ": '" + v + "'");
  }
}

inline std::uint64_t config_uint(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const std::uint64_t x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse unsigned integer for " + key + ": '" + v + "'");
  }
}

}  // namespace detail

// Sectioned key = value text. '#' or ';' starts a comment. Unknown sections
// and keys are rejected so typos cannot silently fall back to defaults.
inline RunConfig parse_run_config_text(const std::string& text,
                                       const std::string& origin) {
  RunConfig cfg;
  cfg.flows.clear();
  std::string stop_rule;
  std::optional<double> stop_value;

  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where =
        origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section at " + where);
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "network" && section != "dataset" && section != "flow" &&
          section != "integrator" && section != "stop" && section != "run") {
        throw ConfigError("unknown section [" + section + "] at " + where);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected key = value at " + where);
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("key outside any section at " + where);
    }
    if (value.empty()) throw ConfigError("empty value for " + key + " at " + where);

    if (section == "network") {
      if (key == "widths") {
        cfg.network.widths.clear();
        for (const std::string& tok : detail::split_ws(value)) {
          cfg.network.widths.push_back(
              static_cast<Index>(detail::config_int(tok, key)));
        }
      } else if (key == "activation") {
        cfg.network.activation = activation_from_string(value);
      } else {
        throw ConfigError("unknown key '" + key + "' in [network] at " + where);
      }
    } else if (section == "dataset") {
      if (key == "source") {
        if (value == "synthetic") cfg.dataset.synthetic = true;
        else if (value == "files") cfg.dataset.synthetic = false;
        else throw ConfigError("dataset source must be synthetic or files at " + where);
      } else if (key == "law") {
        cfg.dataset.law = data_law_from_string(value);
      } else if (key == "n") {
        cfg.dataset.n = static_cast<Index>(detail::config_int(value, key));
      } else if (key == "inputs") {
        cfg.dataset.inputs_csv = value;
      } else if (key == "outputs") {
        cfg.dataset.outputs_csv = value;
      } else {
        throw ConfigError("unknown key '" + key + "' in [dataset] at " + where);
      }
    } else if (section == "flow") {
      if (key == "kind") {
        for (const std::string& tok : detail::split_ws(value)) {
          FlowSelection sel;
          if (tok == "auto") {
            sel.auto_kind = true;
          } else {
            sel.auto_kind = false;
            sel.kind = flow_kind_from_string(tok);
          }
          cfg.flows.push_back(sel);
        }
      } else if (key == "rank_tol") {
        cfg.rank_tol = detail::config_double(value, key);
      } else {
        throw ConfigError("unknown key '" + key + "' in [flow] at " + where);
      }
    } else if (section == "integrator") {
      if (key == "method") {
        cfg.integrator.method = method_from_string(value);
      } else if (key == "step") {
        cfg.integrator.step = detail::config_double(value, key);
        cfg.step_set = true;
      } else if (key == "s_max") {
        cfg.integrator.s_max = detail::config_double(value, key);
        cfg.s_max_set = true;
      } else if (key == "abs_tol") {
        cfg.integrator.abs_tol = detail::config_double(value, key);
      } else if (key == "rel_tol") {
        cfg.integrator.rel_tol = detail::config_double(value, key);
      } else if (key == "sample_every") {
        cfg.integrator.sample_every =
            static_cast<Index>(detail::config_int(value, key));
      } else {
        throw ConfigError("unknown key '" + key + "' in [integrator] at " + where);
      }
    } else if (section == "stop") {
      if (key == "rule") {
        stop_rule = value;
      } else if (key == "value" || key == "eps" || key == "delta" || key == "s") {
        stop_value = detail::config_double(value, key);
      } else {
        throw ConfigError("unknown key '" + key + "' in [stop] at " + where);
      }
    } else if (section == "run") {
      if (key == "seed") {
        cfg.seed = detail::config_uint(value, key);
      } else if (key == "output_dir") {
        cfg.output_dir = value;
      } else {
        throw ConfigError("unknown key '" + key + "' in [run] at " + where);
      }
    }
  }

  if (cfg.flows.empty()) cfg.flows.push_back(FlowSelection{});
  if (!stop_rule.empty()) {
    cfg.stop.kind = stop_kind_from_string(stop_rule);
    if (!stop_value) {
      throw ConfigError("stop rule needs a threshold (value/eps/delta/s) in " +
                        origin);
    }
    cfg.stop.value = *stop_value;
    cfg.stop_set = true;
  } else if (stop_value) {
    throw ConfigError("stop threshold given without a rule in " + origin);
  }
  if (cfg.network.widths.empty()) {
    throw ConfigError("config must set [network] widths in " + origin);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config_text(buf.str(), path);
}

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> flow;
  std::optional<double> eps;
};

inline void apply_overrides(RunConfig& cfg, const ConfigOverrides& ov) {
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out) cfg.output_dir = *ov.out;
  if (ov.flow) {
    cfg.flows.clear();
    for (const std::string& tok : detail::split_ws(*ov.flow)) {
      FlowSelection sel;
      if (tok == "auto") {
        sel.auto_kind = true;
      } else {
        sel.auto_kind = false;
        sel.kind = flow_kind_from_string(tok);
      }
      cfg.flows.push_back(sel);
    }
    if (cfg.flows.empty()) throw ConfigError("--flow needs at least one kind");
  }
  if (ov.eps) {
    if (!(*ov.eps > 0.0)) throw ConfigError("--eps must be positive");
    cfg.stop.value = *ov.eps;
    cfg.stop_set = true;
  }
}

// Fills the size-dependent defaults: step 1e-2 N, cap 50 N, and a plain
// time-limit stop at the cap when no rule was configured.
inline void fill_defaults(RunConfig& cfg) {
  const double n = static_cast<double>(cfg.dataset.n);
  if (!cfg.step_set) cfg.integrator.step = 1e-2 * n;
  if (!cfg.s_max_set) cfg.integrator.s_max = 50.0 * n;
  if (!cfg.stop_set) cfg.stop = StopRule::time_limit(cfg.integrator.s_max);
}

inline std::string canonical_config_text(const RunConfig& cfg,
                                         const FlowSelection& flow) {
  std::ostringstream os;
  os << "network.widths=";
  for (std::size_t i = 0; i < cfg.network.widths.size(); ++i) {
    if (i) os << ',';
    os << cfg.network.widths[i];
  }
  os << "\nnetwork.activation=" << to_string(cfg.network.activation);
  os << "\ndataset.source=" << (cfg.dataset.synthetic ? "synthetic" : "files");
  os << "\ndataset.law=" << to_string(cfg.dataset.law);
  os << "\ndataset.n=" << cfg.dataset.n;
  os << "\ndataset.inputs=" << cfg.dataset.inputs_csv;
  os << "\ndataset.outputs=" << cfg.dataset.outputs_csv;
  os << "\nflow.kind=" << flow.label();
  os << "\nflow.rank_tol=" << format_double(cfg.rank_tol);
  os << "\nintegrator.method=" << to_string(cfg.integrator.method);
  os << "\nintegrator.step=" << format_double(cfg.integrator.step);
  os << "\nintegrator.s_max=" << format_double(cfg.integrator.s_max);
  os << "\nintegrator.abs_tol=" << format_double(cfg.integrator.abs_tol);
  os << "\nintegrator.rel_tol=" << format_double(cfg.integrator.rel_tol);
  os << "\nintegrator.sample_every=" << cfg.integrator.sample_every;
  os << "\nstop.rule=" << to_string(cfg.stop.kind);
  os << "\nstop.value=" << format_double(cfg.stop.value);
  os << "\nrun.seed=" << cfg.seed;
  os << '\n';
  return os.str();
}

inline std::string shared_section_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << "network.widths=";
  for (std::size_t i = 0; i < cfg.network.widths.size(); ++i) {
    if (i) os << ',';
    os << cfg.network.widths[i];
  }
  os << "\nnetwork.activation=" << to_string(cfg.network.activation);
  os << "\ndataset.source=" << (cfg.dataset.synthetic ? "synthetic" : "files");
  os << "\ndataset.law=" << to_string(cfg.dataset.law);
  os << "\ndataset.n=" << cfg.dataset.n;
  os << "\ndataset.inputs=" << cfg.dataset.inputs_csv;
  os << "\ndataset.outputs=" << cfg.dataset.outputs_csv;
  os << "\nrun.seed=" << cfg.seed;
  return os.str();
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

struct RunRecord {
  std::string config_hash;
  FlowKind flow = FlowKind::Standard;
  Termination termination = Termination::Completed;
  double final_cost = 0.0;
  double final_field_norm = 0.0;
  double final_s = 0.0;
  std::optional<RateFit> rate;
  std::optional<double> expected_rate;
  Index n = 0;
  Index k = 0;
  Index qn = 0;
  long steps = 0;
  long rejected_steps = 0;
  std::size_t samples = 0;
  Index sample_every = 1;
  bool verification_pass = false;
  std::vector<std::string> checks_failed;
  double wall_time_s = 0.0;
  double z_displacement = 0.0;  // reported, never asserted
  std::string library_version = kLibraryVersion;
};

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["flow"] = to_string(r.flow);
  j["termination"] = to_string(r.termination);
  j["final_cost"] = r.final_cost;
  j["final_field_norm"] = std::isfinite(r.final_field_norm)
                              ? nlohmann::json(r.final_field_norm)
                              : nlohmann::json(nullptr);
  j["final_s"] = r.final_s;
  if (r.rate) {
    j["rate_fit"] = {{"lambda_hat", r.rate->lambda_hat},
                     {"r_squared", r.rate->r_squared},
                     {"s_lo", r.rate->s_lo},
                     {"s_hi", r.rate->s_hi},
                     {"samples_used", r.rate->samples_used}};
  } else {
    j["rate_fit"] = nullptr;
  }
  j["expected_rate"] =
      r.expected_rate ? nlohmann::json(*r.expected_rate) : nlohmann::json(nullptr);
  j["n"] = r.n;
  j["k"] = r.k;
  j["qn"] = r.qn;
  j["steps"] = r.steps;
  j["rejected_steps"] = r.rejected_steps;
  j["samples"] = r.samples;
  j["sample_every"] = r.sample_every;
  j["verification_pass"] = r.verification_pass;
  j["checks_failed"] = r.checks_failed;
  j["wall_time_s"] = r.wall_time_s;
  j["z_displacement"] = r.z_displacement;
  j["library_version"] = r.library_version;
  return j;
}

namespace detail {

inline void write_text_atomic(const std::string& path, const std::string& text) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot open for writing: " + tmp.string());
    os << text;
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

}  // namespace detail

struct RunResult {
  RunRecord record;
  Trajectory trajectory;
  VerificationReport verification;
  FlowKind resolved_kind = FlowKind::Standard;
  std::string trajectory_path;
  std::string verification_path;
  std::string record_path;
};

inline TrainingSet materialize_dataset(const RunConfig& cfg,
                                       std::uint64_t dataset_seed) {
  TrainingSet data;
  if (cfg.dataset.synthetic) {
    data = generate_dataset(cfg.network.input_dim(), cfg.network.output_dim(),
                            cfg.dataset.n, cfg.dataset.law, dataset_seed);
  } else {
    data = load_training_set(cfg.dataset.inputs_csv, cfg.dataset.outputs_csv);
    if (data.input_dim() != cfg.network.input_dim() ||
        data.output_dim() != cfg.network.output_dim()) {
      throw ConfigError("dataset dimensions do not match the network widths");
    }
  }
  return data;
}

inline FlowKind resolve_flow(const FlowSelection& sel, Index k, Index qn) {
  if (sel.auto_kind) return resolve_auto_flow(k, qn);
  if (!kind_admissible(sel.kind, k, qn)) {
    throw ConfigError("flow kind " + to_string(sel.kind) +
                      " is not admissible for K=" + std::to_string(k) +
                      ", QN=" + std::to_string(qn));
  }
  return sel.kind;
}

inline RunResult run_single(RunConfig cfg, const FlowSelection& sel,
                            const std::string& out_dir) {
  cfg.validate();
  fill_defaults(cfg);

  std::uint64_t seed_state = cfg.seed;
  const std::uint64_t dataset_seed = splitmix64(seed_state);
  const std::uint64_t init_seed = splitmix64(seed_state);

  const TrainingSet data = materialize_dataset(cfg, dataset_seed);
  const Index k = cfg.network.param_count();
  const Index n = data.sample_count();
  const Index qn = data.output_dim() * n;
  const FlowKind kind = resolve_flow(sel, k, qn);
  const Vector z0 = init_params(cfg.network, init_seed);

  const auto t0 = std::chrono::steady_clock::now();
  Trajectory traj = integrate(kind, cfg.network, data, z0, cfg.integrator,
                              cfg.stop, cfg.rank_tol);
  VerificationReport verification =
      verify_trajectory(traj, cfg.network, data, VerifyTolerances{}, cfg.rank_tol);
  const auto t1 = std::chrono::steady_clock::now();

  RunResult result;
  result.resolved_kind = kind;
  result.trajectory = std::move(traj);
  result.verification = std::move(verification);

  RunRecord rec;
  rec.config_hash = hash_hex(fnv1a(canonical_config_text(cfg, sel)));
  rec.flow = kind;
  rec.termination = result.trajectory.termination;
  const FlowSample& last = result.trajectory.final_sample();
  rec.final_cost = last.cost;
  rec.final_field_norm = last.field_norm;
  rec.final_s = last.s;
  try {
    rec.rate = fit_rate(result.trajectory);
  } catch (const InsufficientSamplesError&) {
    rec.rate = std::nullopt;
  }
  if (kind == FlowKind::OverparamModified || kind == FlowKind::BorderlineModified ||
      kind == FlowKind::ComparisonModel) {
    rec.expected_rate = 2.0 / static_cast<double>(n);
  }
  rec.n = n;
  rec.k = k;
  rec.qn = qn;
  rec.steps = result.trajectory.total_steps;
  rec.rejected_steps = result.trajectory.rejected_steps;
  rec.samples = result.trajectory.samples.size();
  rec.sample_every = result.trajectory.sample_every;
  rec.verification_pass = result.verification.all_pass();
  for (const Check& c : result.verification.checks) {
    if (!c.pass) rec.checks_failed.push_back(c.name);
  }
  rec.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
  const FlowSample& first = result.trajectory.samples.front();
  rec.z_displacement =
      first.z.size() > 0 && last.z.size() > 0 ? (last.z - first.z).norm() : 0.0;
  result.record = std::move(rec);

  namespace fs = std::filesystem;
  result.trajectory_path = (fs::path(out_dir) / "trajectory.csv").string();
  result.verification_path = (fs::path(out_dir) / "verification.json").string();
  result.record_path = (fs::path(out_dir) / "runrecord.json").string();

  {
    std::ostringstream os;
    write_trajectory_csv(os, result.trajectory);
    detail::write_text_atomic(result.trajectory_path, os.str());
  }
  detail::write_text_atomic(result.verification_path,
                            to_json(result.verification).dump(2) + "\n");
  detail::write_text_atomic(result.record_path,
                            to_json(result.record).dump(2) + "\n");
  return result;
}

inline RunResult run(const RunConfig& cfg) {
  if (cfg.flows.size() != 1) {
    throw ConfigError(
        "run takes exactly one flow kind; use compare for several");
  }
  return run_single(cfg, cfg.flows.front(), cfg.output_dir);
}

struct CompareResult {
  std::vector<RunResult> runs;
  std::string csv_path;
  std::string text_path;
};

inline CompareResult compare(const std::vector<RunConfig>& configs,
                             const std::string& out_dir) {
  if (configs.empty()) {
    throw MismatchedConfigsError("compare needs at least one config");
  }
  const std::string shared = shared_section_text(configs.front());
  for (const RunConfig& cfg : configs) {
    if (shared_section_text(cfg) != shared) {
      throw MismatchedConfigsError(
          "compare requires identical network, dataset, and seed across configs");
    }
  }

  namespace fs = std::filesystem;
  CompareResult result;
  std::vector<std::string> labels;
  for (const RunConfig& cfg : configs) {
    for (const FlowSelection& sel : cfg.flows) {
      std::string label = sel.label();
      int suffix = 2;
      while (std::find(labels.begin(), labels.end(), label) != labels.end()) {
        label = sel.label() + "-" + std::to_string(suffix++);
      }
      labels.push_back(label);
      const std::string sub = (fs::path(out_dir) / label).string();
      result.runs.push_back(run_single(cfg, sel, sub));
    }
  }

  std::ostringstream csv;
  csv << "flow,termination,final_cost,final_s,fitted_rate,r_squared,"
         "expected_rate,steps,samples,wall_time_s\n";
  for (const RunResult& r : result.runs) {
    csv << to_string(r.record.flow) << ',' << to_string(r.record.termination)
        << ',' << format_double(r.record.final_cost) << ','
        << format_double(r.record.final_s) << ',';
    if (r.record.rate) csv << format_double(r.record.rate->lambda_hat);
    csv << ',';
    if (r.record.rate) csv << format_double(r.record.rate->r_squared);
    csv << ',';
    if (r.record.expected_rate) csv << format_double(*r.record.expected_rate);
    csv << ',' << r.record.steps << ',' << r.record.samples << ','
        << format_double(r.record.wall_time_s) << '\n';
  }
  result.csv_path = (fs::path(out_dir) / "compare.csv").string();
  detail::write_text_atomic(result.csv_path, csv.str());

  std::ostringstream txt;
  txt << std::left << std::setw(22) << "flow" << std::setw(16) << "termination"
      << std::setw(14) << "final_cost" << std::setw(13) << "fitted_rate"
      << std::setw(14) << "expected_rate" << std::setw(8) << "steps"
      << '\n';
  txt << std::string(87, '-') << '\n';
  for (const RunResult& r : result.runs) {
    std::ostringstream cost_s, rate_s, exp_s;
    cost_s << std::scientific << std::setprecision(3) << r.record.final_cost;
    if (r.record.rate) {
      rate_s << std::fixed << std::setprecision(6) << r.record.rate->lambda_hat;
    } else {
      rate_s << "-";
    }
    if (r.record.expected_rate) {
      exp_s << std::fixed << std::setprecision(6) << *r.record.expected_rate;
    } else {
      exp_s << "-";
    }
    txt << std::left << std::setw(22) << to_string(r.record.flow)
        << std::setw(16) << to_string(r.record.termination) << std::setw(14)
        << cost_s.str() << std::setw(13) << rate_s.str() << std::setw(14)
        << exp_s.str() << std::setw(8) << r.record.steps << '\n';
  }
  result.text_path = (fs::path(out_dir) / "compare.txt").string();
  detail::write_text_atomic(result.text_path, txt.str());
  return result;
}

}  // namespace gradflow
