#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mgd/experiment.hpp"
#include "mgd/runtime.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  mgd::configure_runtime(argv);

  CLI::App app{"Masked generative distillation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config_path, "Config file (key = value lines)")->required();

  std::vector<std::string> dirs;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "Tabulate result.json of several runs");
  compare->add_option("dirs", dirs, "Run directories");
  compare->add_option("--out", compare_out, "Output CSV")->required();

  std::string ckpt, heat_config, stage, heat_out;
  std::size_t index = 0;
  auto* heatmap = app.add_subcommand("heatmap", "Write a stage activation heatmap as PGM");
  heatmap->add_option("checkpoint", ckpt, "Model checkpoint (.mgdc)")->required();
  heatmap->add_option("config", heat_config, "Config the checkpoint was trained with")->required();
  heatmap->add_option("--index", index, "Validation image index")->default_val(0);
  heatmap->add_option("--stage", stage, "Stage name, e.g. stage4")->required();
  heatmap->add_option("--out", heat_out, "Output .pgm path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (*run) return mgd::run_config_file(config_path, std::cout, std::cerr);

  if (*compare) {
    try {
      const std::vector<fs::path> paths(dirs.begin(), dirs.end());
      const auto errors = mgd::compare_runs(paths, compare_out);
      for (const auto& e : errors) std::cerr << "warning: " << e << '\n';
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 3;
    }
  }

  try {
    mgd::dump_feature_heatmap(ckpt, heat_config, index, stage, heat_out);
    return 0;
  } catch (const mgd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
