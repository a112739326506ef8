// fedmuscle: run, compare and verify entry point.

#include "fedmuscle/config.hpp"
#include "fedmuscle/report.hpp"
#include "fedmuscle/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace fedmuscle;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

std::atomic<bool> g_stop{false};

extern "C" void on_interrupt(int) { g_stop.store(true); }

struct Overrides {
  std::string config_path;
  std::optional<std::string> seed, algorithm, rounds, local_epochs, cl_epochs, batch, m_select,
      dim, tau_high, tau_low, profile, out_dir;
};

void add_experiment_flags(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_path, "key = value configuration file");
  app.add_option("--seed", o.seed, "experiment.seed");
  app.add_option("--rounds", o.rounds, "federation.rounds");
  app.add_option("--local-epochs", o.local_epochs, "federation.local_epochs");
  app.add_option("--cl-epochs", o.cl_epochs, "federation.cl_epochs");
  app.add_option("--batch", o.batch, "federation.batch_size (public batch B)");
  app.add_option("--m-select", o.m_select, "federation.m_select");
  app.add_option("--dim", o.dim, "model.dim");
  app.add_option("--tau-high", o.tau_high, "muscle.tau_high");
  app.add_option("--tau-low", o.tau_low, "muscle.tau_low");
  app.add_option("--profile", o.profile, "desk or paper defaults");
  app.add_option("--out-dir", o.out_dir, "output directory");
}

ConfigMap resolve(const Overrides& o) {
  ConfigMap values;
  if (!o.config_path.empty()) values = load_config_file(o.config_path);
  auto set = [&](const char* key, const std::optional<std::string>& v) {
    if (v) values[key] = *v;
  };
  set("experiment.seed", o.seed);
  set("experiment.algorithm", o.algorithm);
  set("experiment.profile", o.profile);
  set("federation.rounds", o.rounds);
  set("federation.local_epochs", o.local_epochs);
  set("federation.cl_epochs", o.cl_epochs);
  set("federation.batch_size", o.batch);
  set("federation.m_select", o.m_select);
  set("model.dim", o.dim);
  set("muscle.tau_high", o.tau_high);
  set("muscle.tau_low", o.tau_low);
  set("output.dir", o.out_dir);
  if (!values.contains("output.dir")) values["output.dir"] = "fedmuscle_out";
  return values;
}

std::size_t thread_cap() {
  const char* env = std::getenv("FEDMUSCLE_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigKeyError("FEDMUSCLE_THREADS", "expected a positive integer");
  return static_cast<std::size_t>(v);
}

struct RunOutcome {
  ExperimentResult result;
  RunReport report;
};

RunOutcome run_one(const ExperimentConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  const auto start = std::chrono::steady_clock::now();
  RunOptions options;
  options.threads = thread_cap();
  options.stop = &g_stop;
  auto result = run_experiment(config, options);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const auto trace_path = dir / "trace.csv";
  {
    std::ofstream csv(trace_path, std::ios::binary);
    write_trace_csv(csv, result.trace);
    if (!csv) throw std::runtime_error("cannot write " + trace_path.string());
  }
  const auto marker = dir / "PARTIAL";
  if (result.interrupted) {
    std::ofstream(marker) << "interrupted after round " << result.completed_rounds << " of "
                          << config.rounds << "\n";
  } else {
    fs::remove(marker);
  }

  RunReport report;
  report.config = config;
  report.final_metrics = result.final_metrics;
  report.task_kinds = result.task_kinds;
  report.trace_path = trace_path.string();
  report.ledger_total = result.ledger.total();
  report.predicted = comm_cost(config);
  report.completed_rounds = result.completed_rounds;
  report.interrupted = result.interrupted;
  report.wall_clock_seconds = seconds;
  return {std::move(result), std::move(report)};
}

void write_summary(const RunReport& report, const fs::path& dir) {
  std::ofstream(dir / "summary.json") << report.to_json() << "\n";
}

void print_metrics(const std::string& label, const std::vector<double>& metrics) {
  std::cout << std::left << std::setw(9) << label;
  for (double m : metrics) std::cout << ' ' << std::fixed << std::setprecision(2) << m;
  std::cout << '\n';
}

int cmd_run(const Overrides& o) {
  const auto values = resolve(o);
  const auto config = build_experiment_config(values);
  const fs::path dir = values.at("output.dir");
  auto out = run_one(config, dir);
  write_summary(out.report, dir);
  print_metrics(to_string(config.algorithm), out.report.final_metrics);
  std::cout << "trace: " << out.report.trace_path << "\n";
  if (out.report.interrupted) {
    std::cerr << "interrupted; partial trace written\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_compare(Overrides o, const std::vector<std::string>& algorithms) {
  o.algorithm = "local";
  auto values = resolve(o);
  const auto local_config = build_experiment_config(values);
  const fs::path root = values.at("output.dir");
  auto local = run_one(local_config, root / "local");
  write_summary(local.report, root / "local");
  print_metrics("local", local.report.final_metrics);
  if (local.report.interrupted) return kExitRuntime;

  nlohmann::ordered_json summary;
  summary["schema_version"] = kReportSchemaVersion;
  summary["seed"] = local_config.seed;
  summary["local"] = local.report.final_metrics;
  for (const auto& name : algorithms) {
    values["experiment.algorithm"] = name;
    const auto config = build_experiment_config(values);
    if (config.algorithm == Algorithm::local) continue;
    auto run = run_one(config, root / name);
    if (run.report.interrupted) {
      write_summary(run.report, root / name);
      return kExitRuntime;
    }
    run.report.delta_percent = delta_metric(run.report.final_metrics, local.report.final_metrics);
    write_summary(run.report, root / name);
    print_metrics(name, run.report.final_metrics);
    std::cout << "  delta " << std::fixed << std::setprecision(2) << *run.report.delta_percent
              << "%\n";
    summary["algorithms"][name] = {{"final_metrics", run.report.final_metrics},
                                   {"delta_percent", *run.report.delta_percent}};
  }
  std::ofstream(root / "compare.json") << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_verify(const std::vector<std::string>& suites, const VerifyOptions& options) {
  bool all_ok = true;
  for (const auto& name : suites) {
    const auto suite = parse_suite(name);
    for (const auto& r : run_verify_suite(suite, options)) {
      all_ok = all_ok && r.passed;
      std::cout << (r.passed ? "PASS " : "FAIL ") << to_string(suite) << '.' << r.name
                << "  measured=" << std::scientific << std::setprecision(3) << r.measured
                << "  tolerance=" << r.tolerance;
      if (!r.detail.empty()) std::cout << "  (" << r.detail << ')';
      std::cout << '\n';
    }
  }
  return all_ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated multi-model contrastive learning simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("fedmuscle ") + build_id());

  Overrides run_opts;
  auto* run = app.add_subcommand("run", "Run one experiment and write trace.csv and summary.json");
  add_experiment_flags(*run, run_opts);
  run->add_option("--algorithm", run_opts.algorithm, "muscle, pairwise, gramian or local");

  Overrides cmp_opts;
  std::vector<std::string> cmp_algorithms{"muscle", "pairwise", "gramian"};
  auto* cmp = app.add_subcommand("compare", "Run local training and each algorithm, report delta");
  add_experiment_flags(*cmp, cmp_opts);
  cmp->add_option("--algorithms", cmp_algorithms, "algorithms compared against local")
      ->delimiter(',');

  std::vector<std::string> suites{"identities", "gradients", "oracle", "bound"};
  VerifyOptions verify_opts;
  auto* ver = app.add_subcommand("verify", "Run property suites");
  ver->add_option("--suite", suites, "identities, gradients, oracle, bound")->delimiter(',');
  ver->add_option("--seed", verify_opts.seed, "property seed");
  ver->add_flag("--corrupt-gamma-sign", verify_opts.corrupt_gamma_sign,
                "negative control: flip the sign inside gamma");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  std::signal(SIGINT, on_interrupt);
  std::signal(SIGTERM, on_interrupt);
  try {
    if (*run) return cmd_run(run_opts);
    if (*cmp) return cmd_compare(cmp_opts, cmp_algorithms);
    return cmd_verify(suites, verify_opts);
  } catch (const ConfigKeyError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
