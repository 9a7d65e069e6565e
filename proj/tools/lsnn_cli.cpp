// Command-line front end: run, resume, validate and export spike rasters.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lsnn/io.hpp"

namespace fs = std::filesystem;
using namespace lsnn;

namespace {

int run_cmd(const std::string& config_path, const std::vector<std::string>& sets, const std::string& out,
            bool quiet) {
  auto cfg = load_config_file(config_path, sets);
  const fs::path dir = out.empty() ? resolve_output_dir(cfg) : fs::path(out);
  RunOptions opt;
  opt.quiet = quiet;
  const auto summary = run_experiment(cfg, dir, std::nullopt, opt);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int resume_cmd(const std::string& ckpt_path, const std::vector<std::string>& sets, const std::string& out,
               bool quiet) {
  auto ck = load_checkpoint(ckpt_path);
  auto cfg = parse_config_text(ck.config, sets);
  const fs::path dir = out.empty() ? fs::path(ckpt_path).parent_path() : fs::path(out);
  RunOptions opt;
  opt.quiet = quiet;
  const auto summary = run_experiment(cfg, dir.empty() ? fs::current_path() : dir, std::move(ck.state), opt);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int export_cmd(const std::string& ckpt_path, const std::string& input_path, const std::string& out) {
  auto ck = load_checkpoint(ckpt_path);
  const auto cfg = parse_config_text(ck.config);
  const Trace x = read_matrix_csv(input_path);
  const auto& p = ck.state.params;
  if (x.cols() != p.n_in())
    throw ConfigError(input_path + ": expected " + std::to_string(p.n_in()) + " input columns, found " +
                      std::to_string(x.cols()));
  std::mt19937_64 rng(cfg.seed);
  const auto r = simulate(p, x, false, rng);
  const fs::path dir = out.empty() ? resolve_output_dir(cfg) : fs::path(out);
  fs::create_directories(dir);
  write_raster_csv(dir / "raster.csv", r.raster, p.dt);
  write_readout_csv(dir / "readout.csv", r.readout, p.dt);
  std::cout << "wrote " << (dir / "raster.csv").string() << " and " << (dir / "readout.csv").string() << "\n";
  return 0;
}

int validate_cmd(const std::string& config_path, const std::vector<std::string>& sets) {
  const auto cfg = load_config_file(config_path, sets);
  std::cout << config_text(cfg) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and inspect recurrent networks of adaptive spiking neurons"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, input_path, out;
  std::vector<std::string> sets;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Train the experiment described by a config file");
  run->add_option("config", config_path, "JSON config")->required();
  run->add_option("--set", sets, "Override a key, e.g. --set train.lr=0.001");
  run->add_option("--out", out, "Output directory (default: output_dir under $LSNN_OUTPUT_ROOT)");
  run->add_flag("-q,--quiet", quiet, "No progress log");

  auto* resume = app.add_subcommand("resume", "Continue training from a checkpoint");
  resume->add_option("checkpoint", ckpt_path, "checkpoint.bin")->required();
  resume->add_option("--set", sets, "Override a key, e.g. --set train.iterations=2000");
  resume->add_option("--out", out, "Output directory (default: the checkpoint's directory)");
  resume->add_flag("-q,--quiet", quiet, "No progress log");

  auto* exp = app.add_subcommand("export-raster", "Simulate a checkpointed network on an input CSV");
  exp->add_option("checkpoint", ckpt_path, "checkpoint.bin")->required();
  exp->add_option("input", input_path, "CSV of input spikes, one row per step")->required();
  exp->add_option("--out", out, "Output directory");

  auto* val = app.add_subcommand("validate", "Parse and validate a config, printing the effective values");
  val->add_option("config", config_path, "JSON config")->required();
  val->add_option("--set", sets, "Override a key");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return run_cmd(config_path, sets, out, quiet);
    if (*resume) return resume_cmd(ckpt_path, sets, out, quiet);
    if (*exp) return export_cmd(ckpt_path, input_path, out);
    return validate_cmd(config_path, sets);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
