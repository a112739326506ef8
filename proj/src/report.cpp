#include "fedmuscle/report.hpp"

#include <json.hpp>

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#ifndef FEDMUSCLE_BUILD_ID
#define FEDMUSCLE_BUILD_ID "unknown"
#endif

namespace fedmuscle {

double delta_metric(std::span<const double> alg_metrics, std::span<const double> local_metrics) {
  if (alg_metrics.size() != local_metrics.size()) {
    throw ContractViolation("delta_metric: metric lists differ in length");
  }
  if (alg_metrics.empty()) throw ContractViolation("delta_metric: no users");
  double sum = 0.0;
  for (std::size_t n = 0; n < alg_metrics.size(); ++n) {
    if (!(local_metrics[n] != 0.0)) {
      throw DegenerateInput("delta_metric: local metric of user " + std::to_string(n) +
                            " is zero; relative improvement undefined");
    }
    sum += (alg_metrics[n] - local_metrics[n]) / local_metrics[n];
  }
  return 100.0 * sum / static_cast<double>(alg_metrics.size());
}

namespace {

// Shortest representation that parses back to the same double.
std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_field(const std::string& s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ContractViolation("trace csv: bad field '" + s + "'");
  }
  return v;
}

}  // namespace

void write_trace_csv(std::ostream& out, std::span<const RoundMetrics> trace) {
  std::string s = kTraceHeader;
  s += '\n';
  for (const auto& r : trace) {
    s += std::to_string(r.round) + ',' + std::to_string(r.user) + ',' + shortest(r.task_metric) +
         ',' + shortest(r.cl_loss) + ',' + std::to_string(r.uplink_bytes) + ',' +
         std::to_string(r.downlink_bytes) + '\n';
  }
  out << s;
}

std::vector<RoundMetrics> read_trace_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kTraceHeader) {
    throw ContractViolation("trace csv: unexpected header");
  }
  std::vector<RoundMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw ContractViolation("trace csv: expected 6 columns");
    out.push_back({parse_field<std::size_t>(f[0]), parse_field<UserId>(f[1]),
                   parse_field<double>(f[2]), parse_field<double>(f[3]),
                   parse_field<std::uint64_t>(f[4]), parse_field<std::uint64_t>(f[5])});
  }
  return out;
}

std::vector<double> final_round_metrics(std::span<const RoundMetrics> trace) {
  if (trace.empty()) throw ContractViolation("final_round_metrics: empty trace");
  std::size_t last = 0;
  UserId max_user = 0;
  for (const auto& r : trace) {
    last = std::max(last, r.round);
    max_user = std::max(max_user, r.user);
  }
  std::vector<double> out(max_user + 1, 0.0);
  for (const auto& r : trace) {
    if (r.round == last) out[r.user] = r.task_metric;
  }
  return out;
}

const char* build_id() { return FEDMUSCLE_BUILD_ID; }

std::string RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["build_id"] = build_id();
  nlohmann::ordered_json cfg;
  for (const auto& [k, v] : describe(config)) cfg[k] = v;
  j["config"] = cfg;
  nlohmann::ordered_json users = nlohmann::ordered_json::array();
  for (std::size_t u = 0; u < final_metrics.size(); ++u) {
    users.push_back({{"user", u},
                     {"task_kind", task_kinds.at(u) == HeadKind::classification ? "classification"
                                                                                : "multi_label"},
                     {"metric", task_kinds.at(u) == HeadKind::classification ? "accuracy" : "micro_f1"},
                     {"final_metric", final_metrics[u]}});
  }
  j["users"] = users;
  j["delta_percent"] = delta_percent ? nlohmann::ordered_json(*delta_percent) : nullptr;
  j["trace_path"] = trace_path;
  j["ledger"] = {{"uplink_bytes", ledger_total.uplink_bytes()},
                 {"downlink_bytes", ledger_total.downlink_bytes()},
                 {"predicted_uplink_bytes_per_round", predicted.uplink_all_users_round * 4},
                 {"predicted_downlink_bytes_per_round", predicted.downlink_all_users_round * 4}};
  j["completed_rounds"] = completed_rounds;
  j["interrupted"] = interrupted;
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j.dump(2) + "\n";
}

}  // namespace fedmuscle
