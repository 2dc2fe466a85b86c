// mvi2p command-line entry point.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mvi2p/commands.hpp"

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

/// Flags mirroring every RunConfig key, plus --config and --preset.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::string file;
  std::string preset = "full";

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key=value config file (flags override it)");
    cmd->add_option("--preset", preset, "built-in defaults: full (120 epochs) or desk (30 epochs)")
        ->check(CLI::IsMember({"full", "desk"}));
    for (const auto& key : mvi2p::RunConfig::keys()) {
      cmd->add_option_function<std::string>(
          "--" + key, [this, key](const std::string& v) { values[key] = v; },
          "override " + key);
    }
  }

  /// default < preset < config file < flags
  mvi2p::RunConfig resolve() const {
    mvi2p::RunConfig c = preset == "desk" ? mvi2p::RunConfig::desk_scale() : mvi2p::RunConfig{};
    if (!file.empty()) c.apply_file(file);
    c.apply(values);
    return c;
  }
};

std::vector<std::uint64_t> seed_range(int count) {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < count; ++i) out.push_back(static_cast<std::uint64_t>(i));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view integration and propagation for occluded person re-identification"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, train_flags, ablate_flags;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "render the synthetic corpus to disk");
  gen_flags.attach(gen);
  gen->add_option("--out", gen_out, "corpus directory")->required();

  auto* train = app.add_subcommand("train", "train, checkpoint and evaluate one run");
  train_flags.attach(train);

  mvi2p::EvalOptions eval_opts;
  std::string eval_ckpt, eval_corpus, eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its query/gallery split");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--corpus", eval_corpus, "corpus directory (default: the checkpoint's)");
  eval->add_option("--out", eval_out, "metrics JSON path");
  eval->add_flag("--allow-mismatch", eval_opts.allow_mismatch,
                 "evaluate even when corpus and checkpoint hashes differ");

  mvi2p::AblateOptions ablate_opts;
  int ablate_seeds = 5;
  auto* ablate = app.add_subcommand("ablate", "baseline/+IP/+L/+Q ablation or a lambda/M sweep");
  ablate_flags.attach(ablate);
  ablate->add_option("--seeds", ablate_seeds, "number of seeds (0..n-1)")
      ->check(CLI::PositiveNumber);
  ablate->add_flag("--sweep", ablate_opts.sweep, "sweep lambda and M instead of the ablation");

  mvi2p::ExportOptions export_opts;
  std::string export_ckpt, export_corpus, export_out;
  auto* cam = app.add_subcommand("export-cam", "write per-stage CAMs as PGM images");
  cam->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
  cam->add_option("--corpus", export_corpus, "corpus directory (default: the checkpoint's)");
  cam->add_option("--out", export_out, "output directory (default: <output_dir>/cams)");
  cam->add_option("--sample", export_opts.samples, "query:N, gallery:N or train:N (repeatable)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen) {
      mvi2p::cmd_gen_data(gen_flags.resolve(), gen_out, std::cout);
    } else if (*train) {
      mvi2p::cmd_train(train_flags.resolve(), std::cout);
    } else if (*eval) {
      eval_opts.checkpoint = eval_ckpt;
      eval_opts.corpus = eval_corpus;
      eval_opts.output = eval_out;
      mvi2p::cmd_eval(eval_opts, std::cout);
    } else if (*ablate) {
      ablate_opts.seeds = seed_range(ablate_seeds);
      mvi2p::cmd_ablate(ablate_flags.resolve(), ablate_opts, std::cout);
    } else if (*cam) {
      export_opts.checkpoint = export_ckpt;
      export_opts.corpus = export_corpus;
      export_opts.output = export_out;
      mvi2p::cmd_export_cam(export_opts, std::cout, std::cerr);
    }
  } catch (const mvi2p::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const mvi2p::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
