#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvi2p/config.hpp"
#include "mvi2p/data.hpp"
#include "mvi2p/eval.hpp"
#include "mvi2p/model.hpp"

namespace mvi2p {

/// A loss became non-finite; `step` is the global optimizer step (0-based).
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step(step) {}
  std::size_t step;
};

/// Per-epoch means over the epoch's optimizer steps.
struct EpochTrace {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double l_id = 0.0;
  double l_id2 = 0.0;
  double l_kd = 0.0;
  double total = 0.0;
  double mean_distance = 0.0;  // per image ||teacher - student||; 0 without integration
  std::size_t degenerate_cams = 0;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochTrace&)>;

/// Images of `records[indices]` stacked into [N,3,H,W].
Tensor stack_images(const std::vector<SampleRecord>& records, std::span<const std::size_t> indices);

/// Optimizes `model` on `split.train` for config.epochs epochs of
/// floor(|train| / (P*K)) steps each. Throws TrainingError on a non-finite loss.
std::vector<EpochTrace> train_model(ReidModel& model, const DatasetSplit& split,
                                    const RunConfig& config, const EpochCallback& on_epoch = {});

/// Eval-mode neck descriptors, one row per record.
std::vector<std::vector<double>> extract_descriptors(ReidModel& model,
                                                     const std::vector<SampleRecord>& records,
                                                     double gem_p, std::size_t batch = 64);

RetrievalMetrics evaluate_model(ReidModel& model, const DatasetSplit& split, double gem_p);

ReidModel build_model(const RunConfig& config, int num_train_identities);

struct TrainRun {
  std::vector<EpochTrace> traces;
  RetrievalMetrics metrics;
  std::string config_hash;
  std::string corpus_hash;
  std::string checkpoint_hash;  // empty when no checkpoint was written
};

/// Trains and evaluates in memory; writes nothing.
TrainRun run_training(const DatasetSplit& split, const RunConfig& config,
                      const EpochCallback& on_epoch = {});

/// FNV-1a of a file's bytes, hex encoded.
std::string file_hash(const std::filesystem::path& path);

/// Metrics document: config echo, hashes, seed, metrics, CMC and traces.
/// `traces` may be empty (evaluation of an existing checkpoint).
std::string metrics_json(const RunConfig& config, const std::string& corpus_hash,
                         const RetrievalMetrics& metrics, const std::vector<EpochTrace>& traces,
                         const std::string& checkpoint_hash);

std::string loss_trace_csv(const std::vector<EpochTrace>& traces, const std::string& config_hash);

/// Appends one row to `path`, writing the header when the file is new.
void append_results_ledger(const std::filesystem::path& path, const RunConfig& config,
                           const RetrievalMetrics& metrics);

// ---------------------------------------------------------------------------
// Ablation and hyper-parameter sweeps
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  RetrievalMetrics metrics;
  double first_distance = 0.0;  // epoch-1 mean_distance
  double final_distance = 0.0;  // last-epoch mean_distance
};

struct AblationSummary {
  std::string variant;
  double median_rank1 = 0.0;
  double median_map = 0.0;
};

/// Per-variant run configuration: the Baseline row trains with lambda = 0.
RunConfig variant_config(const RunConfig& base, Variant variant, std::uint64_t seed);

using RowCallback = std::function<void(const AblationRow&)>;

/// Every variant for every seed; rows are variant-major in the given order.
std::vector<AblationRow> ablation_run(const DatasetSplit& split, const RunConfig& base,
                                      std::span<const std::uint64_t> seeds,
                                      std::span<const Variant> variants = kAllVariants,
                                      const RowCallback& on_row = {});

/// Median Rank-1 and mAP per variant, in first-appearance order of `rows`.
std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows);

double median(std::vector<double> values);

std::string ablation_csv(const std::vector<AblationRow>& rows);

struct SweepRow {
  std::string parameter;  // "lambda" or "M"
  double value = 0.0;
  std::uint64_t seed = 0;
  RetrievalMetrics metrics;
};

/// Full-variant runs varying lambda (M fixed) and then M (lambda fixed).
std::vector<SweepRow> sweep_run(const DatasetSplit& split, const RunConfig& base,
                                std::span<const std::uint64_t> seeds,
                                std::span<const double> lambdas,
                                std::span<const std::size_t> views,
                                const std::function<void(const SweepRow&)>& on_row = {});

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace mvi2p
