#include "mfbslq/cli.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mfbslq;
using testing_support::json;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mfbslq_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write_spec(const std::string& name, const json& doc) {
    fs::path p = dir_ / (name + ".json");
    std::ofstream(p) << doc.dump(2);
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  static std::string read(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  fs::path dir_;
};

json zero_terminal(json doc) {
  doc["terminal"]["g0"] = 0.0;
  doc["terminal"]["g1"] = 0.0;
  return doc;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    if (!line.empty() && line.back() == ',') row.push_back("");
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_F(Cli, ZeroTerminalRunsClean) {
  cli::RunConfig cfg;
  cfg.spec_path = write_spec("zero", zero_terminal(testing_support::spec_json("M1")));
  cfg.steps = 4;
  cfg.with_oracle = true;
  cfg.check = true;
  cfg.output = path("zero_report.json");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_ok) << err.str();
  json report = json::parse(read(cfg.output));
  EXPECT_EQ(report["cost"].get<double>(), 0.0);
  EXPECT_TRUE(report["check"]["passed"].get<bool>());
  for (const char* key : {"cost", "eta_star", "lambda_residual", "constraint_residuals", "stationarity_residual", "oracle",
                          "riccati", "timings"})
    EXPECT_TRUE(report.contains(key)) << key;
  EXPECT_TRUE(report["riccati"].contains("min_I_plus_SigmaR_sv"));
}

TEST_F(Cli, S1ReportWithOracle) {
  cli::RunConfig cfg;
  cfg.spec_path = testing_support::spec_path("S1");
  cfg.steps = 16;
  cfg.with_oracle = true;
  cfg.check = true;
  cfg.output = path("s1.json");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_ok) << err.str();
  json report = json::parse(read(cfg.output));
  EXPECT_LE(report["oracle"]["control_error"].get<double>(), 0.1);
}

TEST_F(Cli, InvalidSpecExitsWithOne) {
  cli::RunConfig cfg;
  cfg.spec_path = write_spec("weak", testing_support::scalar_spec(0, 1, 0, 0, 0.1, 1, 0, 1));
  cfg.steps = 4;
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_invalid);
  EXPECT_NE(err.str().find("R >= delta I"), std::string::npos) << err.str();

  cfg.spec_path = path("missing.json");
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_invalid);
  std::ofstream(path("broken.json")) << "{\"n\": 1,";
  cfg.spec_path = path("broken.json");
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_invalid);
}

TEST_F(Cli, CheckModeFailsOnTightTolerance) {
  cli::RunConfig cfg;
  cfg.spec_path = testing_support::spec_path("M1");
  cfg.steps = 16;
  cfg.with_oracle = true;
  cfg.check = true;
  cfg.tolerances.control_error = 1e-3;
  cfg.output = path("tight.json");
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_run(cfg, out, err), cli::exit_check);
  EXPECT_NE(err.str().find("control error"), std::string::npos);
  json report = json::parse(read(cfg.output));
  EXPECT_FALSE(report["check"]["passed"].get<bool>());
}

TEST_F(Cli, ValidateCommand) {
  std::ostringstream out, err;
  EXPECT_EQ(cli::cmd_validate(testing_support::spec_path("M1"), out, err), cli::exit_ok);
  EXPECT_NE(out.str().find("valid"), std::string::npos);

  // A 1x1 matrix is always symmetric; the asymmetry case needs n = 2.
  json d2 = testing_support::spec_json("D2");
  d2["cost"]["R_bar"]["value"] = {{0.2, 0.1}, {0.0, 0.2}};
  std::ostringstream o2, e2;
  EXPECT_EQ(cli::cmd_validate(write_spec("asym", d2), o2, e2), cli::exit_invalid);
  EXPECT_NE(o2.str().find("FAIL  R_bar symmetric"), std::string::npos) << o2.str();

  json two = testing_support::spec_json("D2");
  two["m"] = 2;
  two["dynamics"]["B"]["value"] = {{1.0, 0.0}, {0.5, 1.0}};
  two["dynamics"]["B_bar"]["value"] = {{0.2, 0.0}, {0.0, 0.0}};
  two["cost"]["N"]["value"] = {{1.0, 0.0}, {0.0, 1.0}};
  two["cost"]["N_bar"]["value"] = {{0.5, 0.3}, {0.0, 0.5}};
  std::ostringstream o5, e5;
  EXPECT_EQ(cli::cmd_validate(write_spec("nbar", two), o5, e5), cli::exit_invalid);
  EXPECT_NE(o5.str().find("FAIL  N_bar symmetric"), std::string::npos) << o5.str();

  json q = testing_support::spec_json("D2");
  q["cost"]["Q"]["value"] = {{1.0, 2.0}, {2.0, 1.0}};
  std::ostringstream o3, e3;
  EXPECT_EQ(cli::cmd_validate(write_spec("indef", q), o3, e3), cli::exit_invalid);
  EXPECT_NE(o3.str().find("FAIL  Q >= 0  margin=-1"), std::string::npos) << o3.str();

  json bad = testing_support::spec_json("M1");
  bad["cost"]["N"]["form"] = "wavelet";
  std::ostringstream o4, e4;
  EXPECT_EQ(cli::cmd_validate(write_spec("bad", bad), o4, e4), cli::exit_invalid);
  EXPECT_NE(e4.str().find("cost.N.form"), std::string::npos);
}

TEST_F(Cli, ConvergeS1Rate) {
  cli::ConvergeConfig cfg{testing_support::spec_path("S1"), {4, 8, 16}, path("s1.csv")};
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_converge(cfg, out, err), cli::exit_ok) << err.str();
  auto rows = parse_csv(read(cfg.output));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "nt");
  EXPECT_EQ(rows[0].size(), 9u);
  EXPECT_EQ(rows[1][5], "");
  for (int i = 2; i <= 3; ++i) {
    double r = std::stod(rows[i][5]);
    EXPECT_GE(r, 0.7);
    EXPECT_LE(r, 1.4);
    EXPECT_EQ(rows[i][8], "ok");
  }
}

TEST_F(Cli, ConvergeM1GapDecreases) {
  cli::ConvergeConfig cfg{testing_support::spec_path("M1"), {4, 8, 16}, path("m1.csv")};
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_converge(cfg, out, err), cli::exit_ok) << err.str();
  auto rows = parse_csv(read(cfg.output));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_GT(std::stod(rows[1][3]), std::stod(rows[2][3]));
  EXPECT_GT(std::stod(rows[2][3]), std::stod(rows[3][3]));
}

TEST_F(Cli, ConvergeZeroTerminalAndFailures) {
  cli::ConvergeConfig cfg{write_spec("zero", zero_terminal(testing_support::spec_json("S1"))), {2, 4}, path("z.csv")};
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_converge(cfg, out, err), cli::exit_ok);
  auto rows = parse_csv(read(cfg.output));
  for (int i = 1; i <= 2; ++i)
    for (int c = 2; c <= 4; ++c) EXPECT_EQ(std::stod(rows[i][c]), 0.0);

  cli::ConvergeConfig desc{testing_support::spec_path("S1"), {8, 4}, ""};
  EXPECT_EQ(cli::cmd_converge(desc, out, err), cli::exit_invalid);

  // A table pinned to four steps fails at n_t = 8; the earlier row is kept.
  json pinned = testing_support::spec_json("S1");
  pinned["dynamics"]["A"] = {{"form", "time_table"}, {"values", {0.0, 0.0, 0.0, 0.0}}};
  cli::ConvergeConfig part{write_spec("pinned", pinned), {4, 8}, path("p.csv")};
  EXPECT_EQ(cli::cmd_converge(part, out, err), cli::exit_invalid);
  rows = parse_csv(read(part.output));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][8], "ok");
  EXPECT_EQ(rows[2][8].rfind("failed", 0), 0u);
}

TEST_F(Cli, ReportsAreDeterministic) {
  cli::RunConfig cfg;
  cfg.spec_path = testing_support::spec_path("M1r");
  cfg.steps = 6;
  cfg.with_oracle = true;
  cfg.timings = false;
  std::ostringstream out, err;
  cfg.output = path("a.json");
  ASSERT_EQ(cli::cmd_run(cfg, out, err), cli::exit_ok);
  cfg.output = path("b.json");
  ASSERT_EQ(cli::cmd_run(cfg, out, err), cli::exit_ok);
  std::string a = read(path("a.json")), b = read(path("b.json"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.find("timings"), std::string::npos);
}

TEST_F(Cli, ArgumentParsing) {
  std::string spec = testing_support::spec_path("S1");
  std::string out = path("args.json");
  std::vector<std::string> args = {"mfbslq", "run", "--spec", spec, "--nt", "4", "--out", out, "--no-timings"};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  EXPECT_EQ(cli::main(static_cast<int>(argv.size()), argv.data()), cli::exit_ok);
  EXPECT_FALSE(json::parse(read(out)).contains("timings"));

  std::vector<std::string> bad = {"mfbslq", "run", "--spec", spec, "--nt", "40"};
  std::vector<char*> bargv;
  for (auto& a : bad) bargv.push_back(a.data());
  EXPECT_EQ(cli::main(static_cast<int>(bargv.size()), bargv.data()), cli::exit_invalid);
}
