#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "approxmpc/bench.hpp"
#include "approxmpc/errors.hpp"
#include "helpers.hpp"

using namespace approxmpc;
namespace fs = std::filesystem;

namespace {

std::string small_config(const std::string& models) {
  return R"({
  "plant": {
    "type": "linear",
    "rk4_substeps": 4,
    "linear": {
      "a": [[-1.0, 0.0], [0.0, -0.5]],
      "b": [[1.0], [0.5]],
      "c": [[1.0, 0.0], [0.0, 1.0]],
      "d": [[0.0], [0.0]],
      "u0": [1.0]
    }
  },
  "sampling": { "dt_minutes": 0.5 },
  "excitation": {
    "type": "multilevel", "samples": 400, "train_fraction": 0.8, "seed": 3,
    "levels_per_channel": 5, "hold_min_samples": 2, "hold_max_samples": 5,
    "u_lower": [0.0], "u_upper": [2.0]
  },
  "models": )" + models + R"(,
  "control": {
    "horizon_samples": 3,
    "closed_loop_samples": 6,
    "history_samples": 8,
    "u_lower": [0.0],
    "u_upper": [2.0],
    "modes": ["mpc", "empc"],
    "tracking": { "q": [1.0, 1.0], "r": [0.1], "p_f": [1.0, 1.0] },
    "economic": { "type": "general", "y_quad": [1.0, 1.0], "y_ref": [0.5, 0.5], "u_linear": [0.1] },
    "solver": { "tolerance": 1e-6, "max_iterations": 50 },
    "steady_state": { "starts": 2, "seed": 1 }
  },
  "plot": { "channels": ["y_1", "y_2"] }
})";
}

const char* kModels = R"([
    { "name": "tpwl_1", "type": "tpwl", "points": 1 },
    { "name": "sid", "type": "subspace", "block_rows": 4, "order": 2 },
    { "name": "net", "type": "nn", "n_past": 3, "n_future": 4, "hidden": [5],
      "activations": ["sigmoid"], "epochs": 20, "seed": 3 }
  ])";

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) {
  return s.find(part) != std::string::npos;
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  if (pos == std::string::npos) throw std::runtime_error("pattern not found: " + from);
  return s.replace(pos, from.size(), to);
}

}  // namespace

TEST(Nrmse, KnownValues) {
  Matrix ref(2, 4);
  ref << 1, 2, 3, 4, 5, 6, 7, 8;
  const Vector ys = Vector::Constant(2, 2.0);
  EXPECT_DOUBLE_EQ(nrmse(ref, ref, ys), 0.0);
  EXPECT_DOUBLE_EQ(nrmse(Matrix(ref.array() + 1.0), ref, ys), 0.5);
  // Channel average: errors 1 and 3 with normalizers 1 and 2.
  Matrix p = ref;
  p.row(0).array() += 1.0;
  p.row(1).array() -= 3.0;
  Vector norm(2);
  norm << 1.0, 2.0;
  EXPECT_DOUBLE_EQ(nrmse(p, ref, norm), 0.5 * (1.0 + 1.5));
  EXPECT_THROW(nrmse(p, ref, Vector::Zero(2)), InvalidArgument);
  EXPECT_THROW(nrmse(p.leftCols(3), ref, norm), DimensionMismatch);
}

TEST(Config, BenchmarkFileLoads) {
  const ExperimentConfig cfg = load_config(APPROXMPC_SOURCE_DIR "/config/benchmark.json");
  EXPECT_EQ(cfg.models.size(), 5u);
  EXPECT_EQ(cfg.control.horizon, 15);
  EXPECT_EQ(cfg.excitation.samples, 5000);
  EXPECT_DOUBLE_EQ(cfg.dt, 2.0);
  EXPECT_EQ(cfg.plant.substeps, 20);
}

TEST(Config, SyntaxErrorReportsLine) {
  const std::string msg = config_error("{\n  \"plant\": {\n    \"type\": ,\n  }\n}");
  EXPECT_TRUE(contains(msg, "cfg.json")) << msg;
  EXPECT_TRUE(contains(msg, "line 3")) << msg;
}

TEST(Config, UnknownKeyReportsPath) {
  const std::string text =
      replace(small_config("[]"), "\"q\": [1.0, 1.0]", "\"q\": [1.0, 1.0], \"qq\": 1");
  const std::string msg = config_error(text);
  EXPECT_TRUE(contains(msg, "control.tracking.qq")) << msg;
}

TEST(Config, MissingSeedAndBadValues) {
  EXPECT_TRUE(contains(config_error(replace(small_config("[]"), "\"seed\": 3,", "")), "excitation.seed"));
  EXPECT_TRUE(contains(config_error(replace(small_config("[]"), "\"horizon_samples\": 3", "\"horizon_samples\": 0")),
                       "horizon_samples"));
  EXPECT_TRUE(contains(config_error(replace(small_config("[]"), "\"u_upper\": [2.0]\n", "\"u_upper\": [2.0, 1.0]\n")),
                       "excitation.u_upper"));
  EXPECT_FALSE(config_error(replace(small_config("[]"), "\"mpc\", \"empc\"", "\"lqr\"")).empty());
}

TEST(Config, DuplicateModelNames) {
  const std::string msg = config_error(small_config(
      R"([{ "name": "a", "type": "tpwl", "points": 1 }, { "name": "a", "type": "tpwl", "points": 2 }])"));
  EXPECT_TRUE(contains(msg, "duplicate")) << msg;
}

TEST(Config, NnFutureWindowMustCoverHorizon) {
  const std::string msg = config_error(small_config(
      R"([{ "name": "n", "type": "nn", "n_past": 2, "n_future": 3, "hidden": [4], "activations": ["swish"], "seed": 1 }])"));
  EXPECT_TRUE(contains(msg, "n_future")) << msg;
}

TEST(Config, CommentsAllowed) {
  EXPECT_NO_THROW(parse_config("// header\n" + small_config("[] /* none */")));
}

TEST(Experiment, ZeroModelsGivesPlantRowsOnly) {
  const ExperimentConfig cfg = parse_config(small_config("[]"));
  const std::string out = testutil::fresh_dir("bench_zero");
  const ExperimentReport rep = run_experiment(cfg, out);
  ASSERT_EQ(rep.open_loop.size(), 1u);
  EXPECT_EQ(rep.open_loop[0].model, "plant");
  EXPECT_EQ(rep.open_loop[0].nrmse, 0.0);
  ASSERT_EQ(rep.closed_loop.size(), 2u);
  for (const auto& row : rep.closed_loop) {
    EXPECT_EQ(row.model, "plant");
    EXPECT_EQ(row.status, "ok") << row.message;
    EXPECT_EQ(row.steps, 6);
  }
  EXPECT_TRUE(fs::exists(fs::path(out) / "report.txt"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "open_loop.csv"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "closed_loop.csv"));
  // Steady target of (y - 0.5)^2 summed plus 0.1 u with y = (u, u).
  EXPECT_NEAR(rep.target.u_s(0), 0.5 - 0.025, 1e-5);
}

class ExperimentRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new ExperimentConfig(parse_config(small_config(kModels)));
    out_ = new std::string(testutil::fresh_dir("bench_full"));
    rep_ = new ExperimentReport(run_experiment(*cfg_, *out_));
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete out_;
    delete rep_;
  }
  static ExperimentConfig* cfg_;
  static std::string* out_;
  static ExperimentReport* rep_;
};
ExperimentConfig* ExperimentRun::cfg_ = nullptr;
std::string* ExperimentRun::out_ = nullptr;
ExperimentReport* ExperimentRun::rep_ = nullptr;

TEST_F(ExperimentRun, RowsForEveryModelAndMode) {
  ASSERT_EQ(rep_->open_loop.size(), 4u);
  ASSERT_EQ(rep_->closed_loop.size(), 8u);
  for (const auto& row : rep_->open_loop) {
    EXPECT_EQ(row.status, "ok") << row.model << ": " << row.message;
    EXPECT_TRUE(std::isfinite(row.nrmse));
  }
  // Linear plant: one TPWL point is exact.
  EXPECT_LE(rep_->open_loop[1].nrmse, 1e-6);
  // Mean subtraction on a record that starts off the data mean leaves a small bias.
  EXPECT_LE(rep_->open_loop[2].nrmse, 0.05);
  for (const auto& row : rep_->closed_loop) {
    EXPECT_EQ(row.status, "ok") << row.model << " " << row.mode << ": " << row.message;
    EXPECT_GE(row.max_solve_seconds, row.mean_solve_seconds);
  }
}

TEST_F(ExperimentRun, ReportAccountingMatchesTrajectories) {
  const CsvTextTable table = read_csv_text(*out_ + "/closed_loop.csv");
  const CsvTextTable target = read_csv_text(*out_ + "/target.csv");
  ASSERT_EQ(target.header.size(), 3u);
  ASSERT_EQ(table.rows.size(), 8u);
  const EconomicCost& econ = cfg_->control.economic;
  TrackingCost track{cfg_->control.q, cfg_->control.r, cfg_->control.p_f, rep_->target.y_s,
                     rep_->target.u_s};
  for (const auto& row : table.rows) {
    const std::string file = row[table.column("trajectory_file")];
    const CsvTextTable traj = read_csv_text(*out_ + "/" + file);
    double econ_sum = 0.0, track_sum = 0.0;
    for (const auto& r : traj.rows) {
      Vector u(1), y(2);
      u << std::stod(r[traj.column("u_1")]);
      y << std::stod(r[traj.column("y_1")]), std::stod(r[traj.column("y_2")]);
      econ_sum += econ.value(y, u);
      track_sum += track.stage(y, u);
    }
    EXPECT_EQ(static_cast<int>(traj.rows.size()), std::stoi(row[table.column("steps")]));
    const double econ_rep = std::stod(row[table.column("economic_cost")]);
    EXPECT_NEAR(econ_rep, econ_sum, 1e-8 * std::max(1.0, std::abs(econ_sum))) << file;
    const double obj_rep = std::stod(row[table.column("objective")]);
    const double expect = row[table.column("mode")] == "mpc" ? track_sum : econ_sum;
    EXPECT_NEAR(obj_rep, expect, 1e-8 * std::max(1.0, std::abs(expect))) << file;
  }
}

TEST_F(ExperimentRun, ReportTextHasTables) {
  const std::string text = format_report_text(*rep_);
  EXPECT_TRUE(contains(text, "Time (single step) [s]"));
  EXPECT_TRUE(contains(text, "Objective function"));
  for (const char* m : {"plant", "tpwl_1", "sid", "net"}) EXPECT_TRUE(contains(text, m)) << m;
}

TEST_F(ExperimentRun, ModelFilesRoundTrip) {
  for (const auto& spec : cfg_->models) {
    const std::string path = *out_ + "/models/" + model_file_name(spec);
    ASSERT_TRUE(fs::exists(path)) << path;
    const FittedModel m = load_fitted(path, spec);
    EXPECT_TRUE(m.ok());
    const std::string again = testutil::fresh_dir("bench_rt") + "/m.json";
    save_fitted(again, m);
    std::ifstream a(path), b(again);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << spec.name;
  }
}

TEST_F(ExperimentRun, DatasetFileRoundTrips) {
  const Dataset d = read_dataset_csv(*out_ + "/dataset.csv");
  EXPECT_EQ(d.size(), 400);
  EXPECT_DOUBLE_EQ(d.trajectory.dt, 0.5);
}

TEST_F(ExperimentRun, PlotData) {
  const std::string file = *out_ + "/trajectories/closed_loop_plant_mpc.csv";
  const CsvTable t = read_csv(file);
  const std::string out = testutil::fresh_dir("plot") + "/plot.csv";
  const std::size_t rows = emit_plot_data({{"plant_mpc", t}}, {"y_1", "y_2"}, out);
  EXPECT_EQ(rows, 2 * t.rows.size());
  const CsvTextTable p = read_csv_text(out);
  std::set<std::string> series;
  for (const auto& r : p.rows) series.insert(r[p.column("series")]);
  EXPECT_EQ(series, (std::set<std::string>{"plant_mpc:y_1", "plant_mpc:y_2"}));
  EXPECT_THROW(emit_plot_data({{"plant_mpc", t}}, {}, out), InvalidArgument);
  try {
    emit_plot_data({{"plant_mpc", t}}, {"y_9"}, out);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_TRUE(contains(e.what(), "y_1")) << e.what();
  }
}
