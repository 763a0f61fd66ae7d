#pragma once

#include "mfbslq/error.hpp"
#include "mfbslq/outer.hpp"

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace mfbslq::cli {

// Exit codes shared by every command.
enum ExitCode : int { exit_ok = 0, exit_invalid = 1, exit_solver = 2, exit_check = 3 };

int exit_code_for(ErrorKind kind);

// Thresholds enforced by `run --check`.
struct CheckTolerances {
  double kkt = 1e-9;                    // oracle gradient, relative to 1 + |grad J(0)|
  double cost_gap_floor = -1e-9;        // J(u*) - J(u_oracle)
  double control_error = 0.10;          // applied from n_t >= control_error_min_steps
  int control_error_min_steps = 16;
  double constraint = 1e-8;             // certified constraint residual
  double embedding_stationarity = 1e-10;  // relative to 1 + max |u*|
  double symmetry = 1e-10;
};

struct RunConfig {
  std::string spec_path;
  int steps = 8;
  bool with_oracle = false;
  bool check = false;
  bool timings = true;  // false drops the segregated "timings" object from the file
  std::string output;   // empty: write to the output stream
  CheckTolerances tolerances;
};

struct ConvergeConfig {
  std::string spec_path;
  std::vector<int> steps;
  std::string output;  // CSV; empty: write to the output stream
};

// Report fields in a fixed order; "timings" is the only non-deterministic entry.
nlohmann::ordered_json report_to_json(const PipelineReport& report);

// Failed checks as human-readable lines (empty when all pass).
std::vector<std::string> check_report(const PipelineReport& report, const CheckTolerances& tol);

int cmd_run(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_converge(const ConvergeConfig& config, std::ostream& out, std::ostream& err);
int cmd_validate(const std::string& spec_path, std::ostream& out, std::ostream& err);

// Parses argv and dispatches.
int main(int argc, char** argv);

}  // namespace mfbslq::cli
