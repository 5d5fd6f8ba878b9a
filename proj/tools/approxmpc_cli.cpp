// Command-line front end for the experiment harness.
#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "approxmpc/bench.hpp"
#include "approxmpc/errors.hpp"

namespace fs = std::filesystem;
using namespace approxmpc;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericalFailure = 3;

struct Args {
  std::string config;
  std::string out;
  std::string data;
  std::vector<std::string> inputs;
  std::vector<std::string> channels;
};

Dataset load_or_generate(const ExperimentConfig& cfg, const Args& a) {
  const fs::path cached = a.data.empty() ? fs::path(a.out) / "dataset.csv" : fs::path(a.data);
  if (fs::exists(cached)) return read_dataset_csv(cached.string());
  if (!a.data.empty()) throw ConfigError("data file '" + a.data + "' does not exist");
  const PlantModel plant = make_plant(cfg.plant);
  Dataset d = generate_dataset(cfg, plant);
  fs::create_directories(a.out);
  write_dataset_csv(cached.string(), d);
  return d;
}

int excite(const ExperimentConfig& cfg, const Args& a) {
  fs::create_directories(a.out);
  const PlantModel plant = make_plant(cfg.plant);
  const Dataset d = generate_dataset(cfg, plant);
  write_dataset_csv((fs::path(a.out) / "dataset.csv").string(), d);
  const auto [tr, va] = d.split(cfg.excitation.train_fraction);
  std::cout << "wrote " << (fs::path(a.out) / "dataset.csv").string() << " (" << d.size()
            << " samples, " << tr.size() << " train / " << va.size() << " validation)\n";
  for (const auto& w : d.warnings) std::cerr << "warning: " << w << '\n';
  return kOk;
}

int fit(const ExperimentConfig& cfg, const Args& a, const std::vector<std::string>& types) {
  const Dataset d = load_or_generate(cfg, a);
  const auto [tr, va] = d.split(cfg.excitation.train_fraction);
  const PlantModel plant = make_plant(cfg.plant);
  fs::create_directories(fs::path(a.out) / "models");
  int fitted = 0, failed = 0;
  for (const auto& spec : cfg.models) {
    if (std::find(types.begin(), types.end(), spec.type) == types.end()) continue;
    const FittedModel m = fit_model(spec, plant, tr, va);
    if (!m.ok()) {
      std::cerr << "model '" << spec.name << "' failed: " << m.message << '\n';
      ++failed;
      continue;
    }
    const fs::path file = fs::path(a.out) / "models" / model_file_name(spec);
    save_fitted(file.string(), m);
    std::cout << spec.name << " (" << spec.type << ", dimension " << m.dimension() << ") -> "
              << file.string() << '\n';
    ++fitted;
  }
  if (fitted + failed == 0) {
    throw ConfigError("config has no model of type " + types.front());
  }
  return failed > 0 ? kNumericalFailure : kOk;
}

int run(const ExperimentConfig& cfg, const Args& a, std::vector<ControllerMode> modes) {
  ExperimentOptions opt;
  opt.reuse_models = true;
  opt.modes = std::move(modes);
  const ExperimentReport rep = run_experiment(cfg, a.out, opt);
  std::cout << format_report_text(rep);
  for (const auto& row : rep.closed_loop) {
    if (row.status != "ok") std::cerr << row.model << " (" << row.mode << ") failed: " << row.message << '\n';
  }
  for (const auto& row : rep.open_loop) {
    if (row.status != "ok") std::cerr << row.model << " (open loop) failed: " << row.message << '\n';
  }
  return kOk;
}

int plot(const ExperimentConfig& cfg, const Args& a) {
  std::vector<std::string> files = a.inputs;
  if (files.empty()) {
    const fs::path dir = fs::path(a.out) / "trajectories";
    if (!fs::is_directory(dir)) {
      throw ConfigError("no --input given and '" + dir.string() + "' does not exist");
    }
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".csv") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
  }
  std::vector<PlotSource> sources;
  for (const auto& f : files) sources.push_back({fs::path(f).stem().string(), read_csv(f)});
  const auto& channels = a.channels.empty() ? cfg.plot_channels : a.channels;
  fs::create_directories(a.out);
  const fs::path out = fs::path(a.out) / "plot_data.csv";
  const std::size_t rows = emit_plot_data(sources, channels, out.string());
  std::cout << "wrote " << out.string() << " (" << rows << " rows)\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Approximate-model MPC/EMPC experiment harness"};
  app.require_subcommand(1);
  Args a;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", a.config, "Experiment config (JSON)")->required();
    sub->add_option("--out", a.out, "Output directory")->required();
    return sub;
  };
  add("excite", "Simulate the excitation experiment and write dataset.csv");
  add("fit-pod-tpwl", "Fit the TPWL and POD-TPWL models")
      ->add_option("--data", a.data, "Dataset CSV (default <out>/dataset.csv, generated if absent)");
  add("fit-sid", "Fit the subspace-identified models")->add_option("--data", a.data, "Dataset CSV");
  add("fit-nn", "Train the neural-network predictors")->add_option("--data", a.data, "Dataset CSV");
  add("run-mpc", "Closed-loop tracking MPC for the plant and every model");
  add("run-empc", "Closed-loop economic MPC for the plant and every model");
  add("report", "Full pipeline: open-loop validation, MPC and EMPC, report tables");
  CLI::App* plot_cmd = add("plot-data", "Emit long-format plot data from trajectory CSVs");
  plot_cmd->add_option("--input", a.inputs, "Trajectory CSV (repeatable; default all in <out>/trajectories)");
  plot_cmd->add_option("--channels", a.channels, "Channel columns (default plot.channels)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const ExperimentConfig cfg = load_config(a.config);
    if (cmd == "excite") return excite(cfg, a);
    if (cmd == "fit-pod-tpwl") return fit(cfg, a, {"tpwl", "pod_tpwl"});
    if (cmd == "fit-sid") return fit(cfg, a, {"subspace"});
    if (cmd == "fit-nn") return fit(cfg, a, {"nn"});
    if (cmd == "run-mpc") return run(cfg, a, {ControllerMode::Tracking});
    if (cmd == "run-empc") return run(cfg, a, {ControllerMode::Economic});
    if (cmd == "report") return run(cfg, a, {});
    if (cmd == "plot-data") return plot(cfg, a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
