#pragma once

#include "fedmuscle/config.hpp"
#include "fedmuscle/federation.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedmuscle {

/// Mean relative improvement of `alg_metrics` over `local_metrics`, in percent.
double delta_metric(std::span<const double> alg_metrics, std::span<const double> local_metrics);

inline constexpr const char* kTraceHeader =
    "round,user,task_metric,cl_loss,uplink_bytes,downlink_bytes";
inline constexpr int kReportSchemaVersion = 1;

void write_trace_csv(std::ostream& out, std::span<const RoundMetrics> trace);
std::vector<RoundMetrics> read_trace_csv(std::istream& in);

/// Per-user metrics from the last round present in a trace.
std::vector<double> final_round_metrics(std::span<const RoundMetrics> trace);

const char* build_id();

struct RunReport {
  ExperimentConfig config;
  std::vector<double> final_metrics;
  std::vector<HeadKind> task_kinds;
  std::optional<double> delta_percent;
  std::string trace_path;
  LedgerEntry ledger_total;
  CommCost predicted;
  std::size_t completed_rounds = 0;
  bool interrupted = false;
  double wall_clock_seconds = 0.0;

  std::string to_json() const;
};

}  // namespace fedmuscle
