#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "facetsteer/pipeline.hpp"
#include "json.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitStage = 1;
constexpr int kExitUsage = 2;

int report(int code, const std::string& kind, const std::string& message, const std::string& command,
           const std::string& stage = {}) {
  nlohmann::ordered_json err;
  err["kind"] = kind;
  err["message"] = message;
  if (!command.empty()) err["command"] = command;
  if (!stage.empty()) err["stage"] = stage;
  err["exit_code"] = code;
  std::cerr << nlohmann::ordered_json{{"error", err}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace facetsteer;
  CLI::App app{
      "facetsteer: facet-level personality control vectors in a sparse-autoencoder latent space.\n"
      "Every command reads a JSON config and writes artifacts plus manifests/<command>.json under the output "
      "directory.\nExit codes: 0 ok, 1 stage failure, 2 usage or config error. FACETSTEER_API_KEY supplies "
      "credentials for the external chat scorer and judge.",
      "facetsteer"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;

  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd commands[] = {
      {"corpus-gen", "generate (or import) the facet corpus -> corpus.jsonl"},
      {"corpus-validate", "structural validation and leakage classifier -> validation.json, leakage_*.json"},
      {"acts-synth", "synthesize planted activations (or import FSTA) -> activations.fsta, planted.json"},
      {"sae-train", "train the sparse autoencoder -> sae.fsts, sae_metrics.json"},
      {"mask-build", "F statistics + probes per facet -> masks/<facet>.json"},
      {"cv-train", "contrastive control vectors and ablation -> cvs/<facet>.json, cv_summary.csv, ablation.csv"},
      {"cv-export", "decoded control vectors as FSTA -> cv_bank.fsta"},
      {"caa", "residual-space CAA baseline vectors -> caa_bank.fsta"},
      {"steer", "single injection on the toy model -> steer.json"},
      {"sweep", "alpha sweep in sae and caa modes -> sweep_sae.csv, sweep_caa.csv"},
      {"route", "score queries, select and compose injections -> routing.jsonl"},
      {"eval", "role-play evaluation with FA/MSE/MAE/MTR -> eval_report.json, eval_summary.csv"},
      {"pipeline", "run every stage in order -> full artifact tree and manifest.json"},
  };
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", config_path, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory (overrides output_dir)");
    sub->add_option("-s,--seed", seed, "global seed (overrides seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report(kExitUsage, "usage", e.what(), "");
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    std::ifstream in(config_path, std::ios::binary);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + config_path + " is not valid JSON");
    const auto base = std::filesystem::path(config_path).parent_path();
    if (out_dir) j["output_dir"] = std::filesystem::absolute(*out_dir).string();
    if (seed) j["seed"] = *seed;
    const PipelineConfig cfg = PipelineConfig::from_json(j, base);
    const RunManifest manifest = run_command(command, cfg);
    nlohmann::ordered_json ok{{"command", command},
                              {"output_dir", cfg.output_dir.string()},
                              {"artifacts", manifest.artifacts.size()}};
    std::cout << ok.dump() << std::endl;
    return kExitOk;
  } catch (const StageError& e) {
    return report(kExitStage, e.kind(), e.what(), command, e.stage());
  } catch (const ConfigError& e) {
    return report(kExitUsage, e.kind(), e.what(), command);
  } catch (const Error& e) {
    return report(kExitStage, e.kind(), e.what(), command);
  } catch (const std::exception& e) {
    return report(kExitStage, "error", e.what(), command);
  }
}
