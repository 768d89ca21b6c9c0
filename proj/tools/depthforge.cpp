// depthforge command-line front end.
//
// Exit codes: 0 success (per-set failures are recorded in the manifest),
// 1 usage or configuration error, 2 unreadable input.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "depthforge/depthforge.hpp"

namespace fs = std::filesystem;
using namespace depthforge;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "JSON pipeline configuration");
  cmd->add_option("--seed", args.seed, "Override the config seed");
  cmd->add_option("--workers", args.workers, "Number of frame-set workers")->check(CLI::PositiveNumber);
  cmd->add_flag("-v,--verbose", args.verbose, "Progress messages on stderr");
}

pipeline::PipelineConfig resolve_config(const CommonArgs& args) {
  pipeline::PipelineConfig cfg = args.config.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (args.workers) cfg.workers = *args.workers;
  cfg.validate();
  return cfg;
}

void print_summary(const pipeline::RunManifest& m, const fs::path& out) {
  std::cout << m.summary.dump() << '\n' << "manifest: " << (out / "manifest.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ground-truth depth generation from RGB-D streams"};
  app.set_version_flag("--version", pipeline::kVersion);
  app.require_subcommand(1);

  CommonArgs common;

  std::string gen_in, gen_out;
  auto* gen = app.add_subcommand("generate", "Register and fuse every frame set of a stream");
  gen->add_option("-i,--input", gen_in, "Stream root (color/, depth/, intrinsics.txt)")->required();
  gen->add_option("-o,--output", gen_out, "Output directory")->required();
  add_common(gen, common);

  std::string ev_pred, ev_ref, ev_out, ev_policy = "intersection";
  auto* ev = app.add_subcommand("evaluate", "Compare predicted depth against reference depth");
  ev->add_option("-i,--input", ev_pred, "Directory of predicted depth PNGs")->required();
  ev->add_option("-r,--reference,--gt", ev_ref, "Directory of reference depth PNGs")->required();
  ev->add_option("-o,--output", ev_out, "Write the JSON report here instead of stdout");
  ev->add_option("--mask-policy", ev_policy, "Valid-pixel policy")->check(CLI::IsMember({"intersection"}));
  add_common(ev, common);

  std::string sim_scene, sim_out;
  auto* simc = app.add_subcommand("simulate", "Render a synthetic scene into a noisy stream");
  simc->add_option("-s,--scene", sim_scene, "Scene spec JSON")->required();
  simc->add_option("-o,--output", sim_out, "Output stream directory")->required();
  add_common(simc, common);

  std::string pa_in, pa_gt, pa_out;
  auto* pa = app.add_subcommand("patches", "Cut training patch pairs from input/GT depth");
  pa->add_option("-i,--input", pa_in, "Input depth directory (or stream root)")->required();
  pa->add_option("-g,--gt", pa_gt, "GT depth directory (or generate output)")->required();
  pa->add_option("-o,--output", pa_out, "Output directory")->required();
  add_common(pa, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const pipeline::PipelineConfig cfg = resolve_config(common);
    pipeline::Logger log(common.verbose);
    if (*gen) {
      if (!fs::is_directory(gen_in)) throw LoadError(-1, "input directory not found: " + gen_in);
      const auto m = pipeline::cmd_generate(gen_in, gen_out, cfg, &log);
      print_summary(m, gen_out);
    } else if (*ev) {
      const auto report = pipeline::cmd_evaluate(ev_pred, ev_ref, ev_policy, cfg.metrics, &log);
      const std::string text = report.to_json().dump(2);
      if (ev_out.empty()) {
        std::cout << text << '\n';
      } else {
        std::ofstream out(ev_out);
        out << text << '\n';
        if (!out) throw Error("failed writing " + ev_out);
      }
    } else if (*simc) {
      std::ifstream in(sim_scene);
      if (!in) throw LoadError(-1, "cannot open scene spec " + sim_scene);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw InvalidSpecError(sim_scene + " is not valid JSON: " + e.what());
      }
      const auto m = pipeline::cmd_simulate(sim::scene_from_json(j), sim_out, cfg, &log);
      print_summary(m, sim_out);
    } else if (*pa) {
      const auto m = pipeline::cmd_patches(pa_in, pa_gt, pa_out, cfg, &log);
      print_summary(m, pa_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "depthforge: " << e.what() << '\n';
    return 1;
  } catch (const InvalidSpecError& e) {
    std::cerr << "depthforge: invalid scene spec: " << e.what() << '\n';
    return 1;
  } catch (const LoadError& e) {
    std::cerr << "depthforge: " << e.what() << '\n';
    return 2;
  } catch (const EmptyComparisonError& e) {
    std::cerr << "depthforge: " << e.what() << '\n';
    return 2;
  } catch (const io::PngError& e) {
    std::cerr << "depthforge: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "depthforge: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
