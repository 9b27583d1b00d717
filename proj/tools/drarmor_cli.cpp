#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "drarmor/config.hpp"
#include "drarmor/detector.hpp"
#include "drarmor/errors.hpp"
#include "drarmor/harness.hpp"
#include "drarmor/kernels.hpp"
#include "drarmor/serialize.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::string> defense;
  std::optional<std::string> place;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "Experiment config file (key = value lines)");
  cmd->add_option("--seed", o.seed, "Override the config seed");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--defense", o.defense, "Mitigation mode")
      ->check(CLI::IsMember({"none", "noise", "laplace", "pixelate", "prune"}));
  cmd->add_option("--place", o.place, "Where the attack block is inserted")->check(CLI::IsMember({"start", "deep"}));
}

drarmor::ExperimentConfig resolve(const CommonOptions& o) {
  drarmor::ExperimentConfig config =
      o.config_path.empty() ? drarmor::preset_config("desk") : drarmor::load_config(o.config_path);
  if (o.seed) config.round.seed = *o.seed;
  if (o.defense) config.round.defense.mode = drarmor::parse_defense(*o.defense);
  if (o.place) config.round.attack.placement = *o.place == "start" ? drarmor::Placement::start : drarmor::Placement::deep;
  config.round.check();
  return config;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int run(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with imprint attacks and relevance-based detection"};
  app.require_subcommand(1);
  app.fallthrough(false);

  CommonOptions simulate_opts, demo_opts, detect_opts, sweep_opts;
  auto* simulate = app.add_subcommand("simulate", "Run a full experiment");
  add_common(simulate, simulate_opts);

  auto* demo = app.add_subcommand("attack-demo", "One attacked round; dump originals and reconstructions");
  add_common(demo, demo_opts);
  std::size_t demo_samples = 16;
  demo->add_option("--samples", demo_samples, "Samples held by the demo client")->capture_default_str();

  std::string model_path, batch_path;
  auto* detect = app.add_subcommand("detect", "Run the detector on a serialized model and batch");
  add_common(detect, detect_opts);
  detect->add_option("--model", model_path, "Model container (DRMODEL1)")->required();
  detect->add_option("--batch", batch_path, "Labelled batch container (DRBATCH1)")->required();

  std::vector<std::size_t> sizes{50, 100, 200, 500};
  auto* sweep = app.add_subcommand("leakage-sweep", "Leakage rate as a function of local dataset size");
  add_common(sweep, sweep_opts);
  sweep->add_option("--sizes", sizes, "Local dataset sizes")->delimiter(',')->capture_default_str();

  auto* version = app.add_subcommand("version", "Print the version");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == name;
    if (!known) {
      std::cerr << "unknown subcommand '" << name << "'\n\n" << app.help();
      return 2;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  if (version->parsed()) {
    std::cout << "drarmor " << kVersion << "\n";
    return 0;
  }

  if (simulate->parsed()) {
    const auto config = resolve(simulate_opts);
    const auto result = drarmor::run_experiment(config, simulate_opts.out);
    std::cout << "final accuracy " << fmt(result.final_accuracy) << ", mean leakage " << fmt(result.mean_leakage);
    if (result.delta_acc) std::cout << ", delta_acc " << fmt(*result.delta_acc);
    std::cout << "\nwrote " << simulate_opts.out << "\n";
    return 0;
  }

  if (demo->parsed()) {
    const auto config = resolve(demo_opts);
    const auto result = drarmor::attack_demo(config, demo_samples, demo_opts.out);
    std::cout << "active bins " << result.record.result.active_bins() << ", leaked "
              << result.record.result.leakage_count << ", ssim mean "
              << (result.metrics.ssim_mean ? fmt(*result.metrics.ssim_mean) : "NA") << "\nwrote " << demo_opts.out
              << "\n";
    return 0;
  }

  if (detect->parsed()) {
    const auto config = resolve(detect_opts);
    const drarmor::Model model = drarmor::load_model(model_path);
    const drarmor::LabelledBatch batch = drarmor::load_batch(batch_path);
    const auto report = drarmor::detect(model, batch.inputs, batch.labels, config.round.detector);
    const std::filesystem::path out = std::filesystem::path(detect_opts.out) / "detection.json";
    drarmor::write_file(out, drarmor::report_json(model, report));
    std::cout << "flagged layers:";
    for (std::size_t k : report.flagged_layers()) std::cout << " " << k;
    std::cout << "\nwrote " << out.string() << "\n";
    return 0;
  }

  if (sweep->parsed()) {
    const auto config = resolve(sweep_opts);
    for (const auto& row : drarmor::leakage_sweep(config, sizes, sweep_opts.out)) {
      std::cout << "size " << row.size << ": leak_rate " << fmt(row.leakage_rate) << " (" << row.images_leaked
                << " images)\n";
    }
    return 0;
  }
  std::cerr << app.help();
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const drarmor::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
