#include "agmlab/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace agmlab;

int main(int argc, char** argv) {
  CLI::App app{"Adaptive gradient method experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  long seeds = 0;
  bool print_config = false;

  for (const auto& name : experiment_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment");
    sub->add_option("--config", config_path, "JSON config (missing keys take defaults)");
    sub->add_option("--seeds", seeds, "seed count, replaces the config's seed list")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--override", overrides, "dotted key=value override, repeatable");
    sub->add_flag("--print-config", print_config, "print the resolved config and exit");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string exp = app.get_subcommands().front()->get_name();

  try {
    json user = config_path.empty() ? json{{"experiment", exp}} : load_json_file(config_path);
    json cfg = resolve_config(user, exp);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    if (seeds > 0) cfg["seeds"] = seeds;
    if (!out_dir.empty()) cfg["output_dir"] = out_dir;
    validate_config(cfg);
    if (print_config) {
      std::cout << cfg.dump(2) << "\n";
      return 0;
    }
    RunSummary s = run_experiment(cfg);
    emit_outputs(s, cfg.at("output_dir").get<std::string>());
    for (const auto& c : s.checks)
      std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " value=" << fmt_double(c.value)
                << " threshold=" << fmt_double(c.threshold) << "\n";
    std::cout << "wrote " << cfg.at("output_dir").get<std::string>() << "/" << s.experiment << "_summary.json\n";
    return s.all_pass() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "agmlab: " << e.what() << "\n";
    return 2;
  }
}
