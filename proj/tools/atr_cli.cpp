#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "atr/atr.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::string> mode;
  std::optional<std::string> output_dir;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> only_seed;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool per_seed) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set attack.lambda=0.01")->take_all();
  cmd->add_option("--mode", c.mode, "attack mode: none | 2ft-white | 2ft-black | icl");
  cmd->add_option("-o,--output-dir", c.output_dir, "run directory");
  cmd->add_option("--seeds", c.seeds, "seed list")->delimiter(',');
  if (per_seed) cmd->add_option("--seed", c.only_seed, "run the stage for this seed only");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress lines");
}

atr::ExperimentConfig resolve(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.mode) ov.push_back("attack.mode=\"" + *c.mode + "\"");
  if (c.output_dir) ov.push_back("output_dir=\"" + *c.output_dir + "\"");
  if (!c.seeds.empty()) {
    std::string s = "seeds=[";
    for (std::size_t k = 0; k < c.seeds.size(); ++k) s += (k ? "," : "") + std::to_string(c.seeds[k]);
    ov.push_back(s + "]");
  }
  return atr::load_config(c.config, ov);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial text-rewriting testbed for text-aware recommenders"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::pair<CLI::App*, std::string>> stages;
  for (auto st : atr::all_stages()) {
    auto* cmd = app.add_subcommand(atr::stage_name(st), "run the " + atr::stage_name(st) + " stage");
    add_common(cmd, common, true);
    stages.push_back({cmd, atr::stage_name(st)});
  }
  auto* report = app.add_subcommand("report", "aggregate evaluated seeds into report.json");
  add_common(report, common, false);
  auto* run_all = app.add_subcommand("run-all", "run every pending stage, then the report");
  add_common(run_all, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(atr::ErrorKind::kConfig);
  }

  try {
    atr::Pipeline p(resolve(common), common.quiet ? nullptr : &std::clog);
    if (run_all->parsed()) {
      p.run_all();
      std::cout << p.report_path().string() << "\n";
      return 0;
    }
    if (report->parsed()) {
      p.report();
      std::cout << p.report_path().string() << "\n";
      return 0;
    }
    for (const auto& [cmd, name] : stages) {
      if (!cmd->parsed()) continue;
      const auto st = atr::stage_from_name(name);
      if (common.only_seed) {
        const auto& seeds = p.config().seeds;
        if (std::find(seeds.begin(), seeds.end(), *common.only_seed) == seeds.end())
          throw atr::ConfigError("seed " + std::to_string(*common.only_seed) + " is not in the config");
        p.run_stage(st, *common.only_seed);
      } else {
        p.run_stage_all_seeds(st);
      }
      std::cout << p.root().string() << "\n";
    }
    return 0;
  } catch (const atr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.kind() == atr::ErrorKind::kRuntime)
      std::cerr << "completed stages are recorded in progress.json; rerun the same command to resume\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(atr::ErrorKind::kRuntime);
  }
}
