#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvi2p/config.hpp"
#include "mvi2p/train.hpp"

namespace mvi2p {

/// Bad invocation (unknown sample, hash mismatch without override, ...); exit code 1.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Exclusive ownership of an output directory through a `.lock` file.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// The corpus named by config.corpus, or an in-memory split from the config.
/// Corpus fields of `config` are overwritten with the loaded corpus settings.
DatasetSplit load_split(RunConfig& config);

/// Writes manifest and images to `dir`; returns the corpus hash.
std::string cmd_gen_data(const RunConfig& config, const std::filesystem::path& dir,
                         std::ostream& log);

struct TrainArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::filesystem::path loss_trace;
  std::filesystem::path ledger;
  std::string checkpoint_hash;
  TrainRun run;
};

/// Trains, checkpoints and evaluates into config.output_dir.
TrainArtifacts cmd_train(RunConfig config, std::ostream& log);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path corpus;  // empty: the checkpoint's own corpus setting
  std::filesystem::path output;  // metrics JSON path; empty: next to the checkpoint
  bool allow_mismatch = false;
};

/// Neck-stage retrieval metrics of a saved checkpoint.
RetrievalMetrics cmd_eval(const EvalOptions& options, std::ostream& log);

struct AblateOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool sweep = false;
  std::vector<double> lambdas{0.0, 0.001, 0.007, 0.05};
  std::vector<std::size_t> views{1, 2, 4, 8};
};

/// Writes ablation.csv (or sweep.csv) into config.output_dir and prints medians.
void cmd_ablate(RunConfig config, const AblateOptions& options, std::ostream& log);

struct ExportOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path corpus;
  std::filesystem::path output;
  std::vector<std::string> samples;  // "query:3", "gallery:0", "train:12" or a bare query index
};

/// Writes {pid}_{view}_{stage}.pgm for stages baseline, ip, ip_l, ip_l_q.
/// Returns the written paths.
std::vector<std::filesystem::path> cmd_export_cam(const ExportOptions& options, std::ostream& log,
                                                  std::ostream& err);

}  // namespace mvi2p
