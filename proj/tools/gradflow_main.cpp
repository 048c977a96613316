#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradflow/gradflow.hpp"

namespace {

namespace fs = std::filesystem;

void print_run_summary(const gradflow::RunResult& result) {
  const gradflow::RunRecord& rec = result.record;
  std::cout << "flow:         " << gradflow::to_string(rec.flow) << '\n';
  std::cout << "termination:  " << gradflow::to_string(rec.termination) << '\n';
  std::cout << "final s:      " << rec.final_s << '\n';
  std::cout << "final cost:   " << rec.final_cost << '\n';
  if (rec.rate) {
    std::cout << "fitted rate:  " << rec.rate->lambda_hat;
    if (rec.expected_rate) std::cout << "  (expected " << *rec.expected_rate << ")";
    std::cout << '\n';
  }
  std::cout << "steps:        " << rec.steps << '\n';
  std::cout << "verification: " << (rec.verification_pass ? "pass" : "FAIL");
  if (!rec.checks_failed.empty()) {
    std::cout << " (";
    for (std::size_t i = 0; i < rec.checks_failed.size(); ++i) {
      if (i) std::cout << ", ";
      std::cout << rec.checks_failed[i];
    }
    std::cout << ")";
  }
  std::cout << '\n';
  std::cout << "wrote " << result.trajectory_path << '\n';
  std::cout << "wrote " << result.verification_path << '\n';
  std::cout << "wrote " << result.record_path << '\n';
}

int exit_code_for(const std::vector<gradflow::RunResult>& results) {
  bool invariant_failure = false;
  for (const gradflow::RunResult& r : results) {
    if (r.record.termination == gradflow::Termination::RankLost) return 3;
    if (r.record.termination == gradflow::Termination::StepUnderflow ||
        !r.record.verification_pass) {
      invariant_failure = true;
    }
  }
  return invariant_failure ? 1 : 0;
}

int do_run(const std::string& config_path, const gradflow::ConfigOverrides& ov) {
  gradflow::RunConfig cfg = gradflow::parse_run_config(config_path);
  gradflow::apply_overrides(cfg, ov);
  const gradflow::RunResult result = gradflow::run(cfg);
  print_run_summary(result);
  return exit_code_for({result});
}

int do_compare(const std::vector<std::string>& config_paths,
               const gradflow::ConfigOverrides& ov) {
  std::vector<gradflow::RunConfig> cfgs;
  for (const std::string& path : config_paths) {
    gradflow::RunConfig cfg = gradflow::parse_run_config(path);
    gradflow::apply_overrides(cfg, ov);
    cfgs.push_back(std::move(cfg));
  }
  const std::string out_dir = ov.out ? *ov.out : cfgs.front().output_dir;
  const gradflow::CompareResult result = gradflow::compare(cfgs, out_dir);
  std::ifstream table(result.text_path);
  std::cout << table.rdbuf();
  std::cout << "wrote " << result.csv_path << '\n';
  std::cout << "wrote " << result.text_path << '\n';
  return exit_code_for(result.runs);
}

int do_gen_data(long long m, long long q, long long n, const std::string& law,
                std::uint64_t seed, const std::string& out_dir) {
  const gradflow::TrainingSet data = gradflow::generate_dataset(
      m, q, n, gradflow::data_law_from_string(law), seed);
  fs::create_directories(out_dir);
  const std::string inputs = (fs::path(out_dir) / "inputs.csv").string();
  const std::string outputs = (fs::path(out_dir) / "outputs.csv").string();
  gradflow::save_training_set(data, inputs, outputs);
  std::cout << "wrote " << inputs << '\n';
  std::cout << "wrote " << outputs << '\n';
  return 0;
}

int do_verify(const std::string& csv_path, std::optional<double> expect_rate,
              std::optional<double> expect_residual_rate, long long sample_every,
              const std::string& out_path) {
  const gradflow::TrajectoryTable table = gradflow::read_trajectory_csv(csv_path);
  gradflow::TableExpectations expect;
  expect.cost_rate = expect_rate;
  expect.residual_rate = expect_residual_rate;
  expect.sample_every = sample_every;
  const gradflow::VerificationReport report =
      gradflow::verify_table(table, expect);
  const std::string text = gradflow::to_json(report).dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    gradflow::detail::write_text_atomic(out_path, text);
    std::cout << "wrote " << out_path << '\n';
  }
  return report.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-flow training dynamics for small dense networks"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed_flag;
  std::optional<std::string> out_flag;
  std::optional<std::string> flow_flag;
  std::optional<double> eps_flag;

  auto add_override_flags = [&](CLI::App* cmd, bool with_flow) {
    cmd->add_option("--seed", seed_flag, "Override the run seed");
    cmd->add_option("--out", out_flag, "Override the output directory");
    if (with_flow) {
      cmd->add_option("--flow", flow_flag,
                      "Override the flow kind(s): auto, standard, "
                      "overparam-modified, underparam-modified, "
                      "borderline-modified, comparison-model");
    }
    cmd->add_option("--eps", eps_flag, "Override the stop-rule threshold");
  };

  std::string run_config;
  CLI::App* run_cmd = app.add_subcommand("run", "Integrate one flow from a config file");
  run_cmd->add_option("config", run_config, "Run configuration file")->required();
  add_override_flags(run_cmd, true);

  std::vector<std::string> compare_configs;
  CLI::App* compare_cmd = app.add_subcommand(
      "compare", "Run several flows on one network and dataset, then tabulate");
  compare_cmd->add_option("configs", compare_configs, "Configuration files")
      ->required();
  add_override_flags(compare_cmd, true);

  long long gen_m = 2, gen_q = 2, gen_n = 4;
  std::string gen_law = "gaussian";
  std::uint64_t gen_seed = 1;
  std::string gen_out = "data";
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV");
  gen_cmd->add_option("--m", gen_m, "Input dimension");
  gen_cmd->add_option("--q", gen_q, "Number of classes = output dimension");
  gen_cmd->add_option("--n", gen_n, "Number of samples");
  gen_cmd->add_option("--law", gen_law, "Input law: gaussian or grid");
  gen_cmd->add_option("--seed", gen_seed, "Generator seed");
  gen_cmd->add_option("--out", gen_out, "Output directory");

  std::string verify_csv;
  std::optional<double> verify_rate;
  std::optional<double> verify_residual_rate;
  long long verify_sample_every = 1;
  std::string verify_out;
  CLI::App* verify_cmd = app.add_subcommand(
      "verify", "Re-check the table invariants of a trajectory CSV");
  verify_cmd->add_option("trajectory", verify_csv, "trajectory.csv to verify")
      ->required();
  verify_cmd->add_option("--expect-rate", verify_rate,
                         "Expected exponential cost-decay rate");
  verify_cmd->add_option("--expect-residual-rate", verify_residual_rate,
                         "Expected output-residual decay rate");
  verify_cmd->add_option("--sample-every", verify_sample_every,
                         "Steps between recorded samples");
  verify_cmd->add_option("--out", verify_out, "Write the report JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  gradflow::ConfigOverrides ov;
  ov.seed = seed_flag;
  ov.out = out_flag;
  ov.flow = flow_flag;
  ov.eps = eps_flag;

  try {
    if (run_cmd->parsed()) return do_run(run_config, ov);
    if (compare_cmd->parsed()) return do_compare(compare_configs, ov);
    if (gen_cmd->parsed()) {
      return do_gen_data(gen_m, gen_q, gen_n, gen_law, gen_seed, gen_out);
    }
    if (verify_cmd->parsed()) {
      return do_verify(verify_csv, verify_rate, verify_residual_rate,
                       verify_sample_every, verify_out);
    }
  } catch (const gradflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const gradflow::InvalidShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const gradflow::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 2;
  } catch (const gradflow::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
