#include "mvi2p/commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include "mvi2p/multiview.hpp"
#include "mvi2p/ops.hpp"

namespace mvi2p {

namespace fs = std::filesystem;

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw std::runtime_error("output directory " + dir.string() +
                               " is locked by another run (remove " + path_.string() +
                               " if stale)");
    }
    throw std::runtime_error("cannot create " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

void adopt_corpus_settings(RunConfig& config, const SplitConfig& s) {
  config.num_ids = s.num_ids;
  config.imgs_per_id = s.imgs_per_id;
  config.num_cams = s.num_cams;
  config.queries_per_id = s.queries_per_id;
  config.occlusion_prob_train = s.occlusion_prob_train;
  config.occlusion_prob_query = s.occlusion_prob_query;
  config.occlusion_prob_gallery = s.occlusion_prob_gallery;
  config.data_seed = s.master_seed;
  config.image_height = s.geometry.height;
  config.image_width = s.geometry.width;
}

/// Rebuilds the run configuration stored in a checkpoint and loads its weights.
struct LoadedRun {
  RunConfig config;
  CheckpointMeta meta;
  std::unique_ptr<ReidModel> model;
};

LoadedRun load_run(const fs::path& checkpoint) {
  LoadedRun run;
  run.meta = read_checkpoint_meta(checkpoint);
  try {
    run.config.apply_text(join_lines(run.meta.config_lines), checkpoint.string());
    run.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  run.model = std::make_unique<ReidModel>(build_model(run.config, run.config.num_ids / 2));
  load_checkpoint(checkpoint, *run.model);
  return run;
}

DatasetSplit split_for(LoadedRun& run, const fs::path& corpus_override, bool allow_mismatch,
                       std::ostream& log) {
  if (!corpus_override.empty()) run.config.corpus = corpus_override.string();
  const std::string stored_corpus = run.config.corpus;
  DatasetSplit split = load_split(run.config);
  const std::string hash = hex64(corpus_hash(split));
  if (hash != run.meta.corpus_hash) {
    const std::string msg = "corpus hash " + hash + " does not match the checkpoint's " +
                            run.meta.corpus_hash +
                            (stored_corpus.empty() ? std::string() : " (" + stored_corpus + ")");
    if (!allow_mismatch) throw UsageError(msg + "; pass --allow-mismatch to evaluate anyway");
    log << "warning: " << msg << "\n";
  }
  if (split.num_train_identities != static_cast<int>(run.model->head().num_identities())) {
    throw UsageError("corpus has " + std::to_string(split.num_train_identities) +
                     " training identities but the checkpoint head has " +
                     std::to_string(run.model->head().num_identities()));
  }
  return split;
}

}  // namespace

DatasetSplit load_split(RunConfig& config) {
  if (config.corpus.empty()) return make_split(config.split_config());
  DatasetSplit split = read_corpus(config.corpus);
  adopt_corpus_settings(config, split.config);
  return split;
}

std::string cmd_gen_data(const RunConfig& config, const fs::path& dir, std::ostream& log) {
  try {
    config.split_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  OutputLock lock(dir);
  const DatasetSplit split = make_split(config.split_config());
  validate_split(split);
  write_corpus(dir, split);
  const std::string hash = hex64(corpus_hash(split));
  log << "corpus " << dir.string() << ": " << split.train.size() << " train, "
      << split.query.size() << " query, " << split.gallery.size() << " gallery\n";
  log << "corpus_hash " << hash << "\n";
  return hash;
}

TrainArtifacts cmd_train(RunConfig config, std::ostream& log) {
  const DatasetSplit split = load_split(config);
  config.validate();
  const fs::path out = config.output_dir;
  OutputLock lock(out);

  TrainArtifacts art;
  art.run.config_hash = config.hash();
  art.run.corpus_hash = hex64(corpus_hash(split));
  log << "config_hash " << art.run.config_hash << "  corpus_hash " << art.run.corpus_hash << "\n";

  ReidModel model = build_model(config, split.num_train_identities);
  art.run.traces = train_model(model, split, config, [&](const EpochTrace& t) {
    log << "epoch " << std::setw(3) << t.epoch << "  lr " << t.lr << "  l_id " << std::fixed
        << std::setprecision(4) << t.l_id << "  l_id2 " << t.l_id2 << "  l_kd " << t.l_kd
        << "  total " << t.total << "  dist " << t.mean_distance << std::defaultfloat
        << std::setprecision(6) << "  degenerate " << t.degenerate_cams << "\n";
  });

  art.checkpoint = out / "checkpoint.txt";
  save_checkpoint(art.checkpoint, model,
                  CheckpointMeta{art.run.config_hash, art.run.corpus_hash,
                                 split_lines(config.to_text())});
  art.checkpoint_hash = file_hash(art.checkpoint);

  art.run.metrics = evaluate_model(model, split, config.gem_p);
  art.run.checkpoint_hash = art.checkpoint_hash;

  write_text(out / "config.txt", "# config_hash=" + art.run.config_hash + "\n" + config.to_text());
  art.metrics = out / "metrics.json";
  write_text(art.metrics, metrics_json(config, art.run.corpus_hash, art.run.metrics,
                                       art.run.traces, art.checkpoint_hash));
  art.loss_trace = out / "loss_trace.csv";
  write_text(art.loss_trace, loss_trace_csv(art.run.traces, art.run.config_hash));
  art.ledger = out / "results.csv";
  append_results_ledger(art.ledger, config, art.run.metrics);

  const auto& m = art.run.metrics;
  log << std::fixed << std::setprecision(2) << "rank1 " << m.rank1 << "  rank5 " << m.rank5
      << "  rank10 " << m.rank10 << "  mAP " << m.map << std::defaultfloat << "\n";
  log << "checkpoint " << art.checkpoint.string() << " (" << art.checkpoint_hash << ")\n";
  return art;
}

RetrievalMetrics cmd_eval(const EvalOptions& options, std::ostream& log) {
  LoadedRun run = load_run(options.checkpoint);
  const DatasetSplit split = split_for(run, options.corpus, options.allow_mismatch, log);
  const RetrievalMetrics m = evaluate_model(*run.model, split, run.config.gem_p);
  const fs::path out =
      options.output.empty() ? options.checkpoint.parent_path() / "eval_metrics.json" : options.output;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, metrics_json(run.config, hex64(corpus_hash(split)), m, {},
                               file_hash(options.checkpoint)));
  log << std::fixed << std::setprecision(2) << "rank1 " << m.rank1 << "  rank5 " << m.rank5
      << "  rank10 " << m.rank10 << "  mAP " << m.map << std::defaultfloat << "\n";
  log << "metrics " << out.string() << "\n";
  return m;
}

void cmd_ablate(RunConfig config, const AblateOptions& options, std::ostream& log) {
  if (options.seeds.empty()) throw UsageError("ablate: need at least one seed");
  const DatasetSplit split = load_split(config);
  config.validate();
  const fs::path out = config.output_dir;
  OutputLock lock(out);
  log << "config_hash " << config.hash() << "  corpus_hash " << hex64(corpus_hash(split)) << "\n";

  if (options.sweep) {
    const auto rows = sweep_run(split, config, options.seeds, options.lambdas, options.views,
                                [&](const SweepRow& r) {
                                  log << r.parameter << "=" << r.value << " seed " << r.seed
                                      << "  rank1 " << r.metrics.rank1 << "  mAP "
                                      << r.metrics.map << "\n";
                                });
    write_text(out / "sweep.csv", "# config_hash=" + config.hash() + "\n" + sweep_csv(rows));
    log << "wrote " << (out / "sweep.csv").string() << "\n";
    return;
  }

  const auto rows = ablation_run(split, config, options.seeds, kAllVariants,
                                 [&](const AblationRow& r) {
                                   log << r.variant << " seed " << r.seed << "  rank1 "
                                       << r.metrics.rank1 << "  mAP " << r.metrics.map << "\n";
                                 });
  write_text(out / "ablation.csv", "# config_hash=" + config.hash() + "\n" + ablation_csv(rows));
  log << "\nmedian over " << options.seeds.size() << " seed(s)\n";
  log << "variant     rank1    mAP\n";
  for (const auto& s : summarize(rows)) {
    log << std::left << std::setw(10) << s.variant << std::right << std::fixed
        << std::setprecision(2) << std::setw(7) << s.median_rank1 << std::setw(8) << s.median_map
        << std::defaultfloat << "\n";
  }
  log << "wrote " << (out / "ablation.csv").string() << "\n";
}

namespace {

struct SampleRef {
  const std::vector<SampleRecord>* records = nullptr;
  std::size_t index = 0;
  bool training = false;
};

SampleRef resolve_sample(const DatasetSplit& split, const std::string& id) {
  std::string kind = "query", number = id;
  if (const auto colon = id.find(':'); colon != std::string::npos) {
    kind = id.substr(0, colon);
    number = id.substr(colon + 1);
  }
  const std::vector<SampleRecord>* records = nullptr;
  if (kind == "query") records = &split.query;
  else if (kind == "gallery") records = &split.gallery;
  else if (kind == "train") records = &split.train;
  else throw UsageError("unknown sample id '" + id + "' (use query:N, gallery:N or train:N)");
  std::size_t pos = 0;
  unsigned long long index = 0;
  try {
    index = std::stoull(number, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (number.empty() || pos != number.size() || number[0] == '-') {
    throw UsageError("unknown sample id '" + id + "'");
  }
  if (index >= records->size()) {
    throw UsageError("unknown sample id '" + id + "': " + kind + " has " +
                     std::to_string(records->size()) + " records");
  }
  return SampleRef{records, static_cast<std::size_t>(index), kind == "train"};
}

std::size_t argmax_row(const Tensor& probs) {
  const auto d = probs.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

Tensor slice_map(const Tensor& maps, std::size_t i) {
  const std::size_t c = maps.size(1), h = maps.size(2), w = maps.size(3);
  const std::size_t per = c * h * w;
  std::vector<double> v(maps.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                        maps.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  return Tensor({c, h, w}, std::move(v));
}

Tensor pooled_neck(const Tensor& map, ReidModel& model, double gem_p) {
  const Shape s = map.shape();
  Tensor batch = reshape(map, Shape{1, s[0], s[1], s[2]});
  return neck(gem_pool(batch, gem_p), model.neck(), BatchNormMode::Eval);
}

}  // namespace

std::vector<fs::path> cmd_export_cam(const ExportOptions& options, std::ostream& log,
                                     std::ostream& err) {
  if (options.samples.empty()) throw UsageError("export-cam: no samples requested");
  LoadedRun run = load_run(options.checkpoint);
  const DatasetSplit split = split_for(run, options.corpus, false, log);
  std::vector<SampleRef> refs;
  for (const auto& id : options.samples) refs.push_back(resolve_sample(split, id));

  const fs::path out = options.output.empty() ? fs::path(run.config.output_dir) / "cams"
                                              : options.output;
  fs::create_directories(out);
  ReidModel& model = *run.model;
  const double gem_p = run.config.gem_p;
  const std::string comment = "config_hash=" + run.meta.config_hash;
  std::vector<fs::path> written;

  for (std::size_t r = 0; r < refs.size(); ++r) {
    const auto& records = *refs[r].records;
    const SampleRecord& rec = records[refs[r].index];

    // The sample first, then up to M-1 other records of the same identity.
    std::vector<std::size_t> members{refs[r].index};
    std::size_t view = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].pid != rec.pid) continue;
      if (i < refs[r].index) ++view;
      if (i != refs[r].index && members.size() < run.config.M) members.push_back(i);
    }

    Tensor maps = model.backbone().forward(stack_images(records, members), BatchNormMode::Eval)
                      .detach();
    const Tensor sample_map = slice_map(maps, 0);

    std::size_t identity = 0;
    if (refs[r].training) {
      identity = static_cast<std::size_t>(rec.pid);
    } else {
      identity = argmax_row(classify(pooled_neck(sample_map, model, gem_p), model.head()));
    }
    const Tensor theta = model.head().row(static_cast<int>(identity)).detach();

    std::vector<Tensor> raw, localized;
    std::vector<double> probabilities;
    for (std::size_t m = 0; m < members.size(); ++m) {
      raw.push_back(slice_map(maps, m));
      const Localization loc = localize(FeatureMap{raw.back(), rec.pid, static_cast<int>(m)}, theta);
      localized.push_back(loc.localized.values);
      probabilities.push_back(
          classify(pooled_neck(localized.back(), model, gem_p), model.head())[identity]);
    }

    auto integrate_maps = [&](const std::vector<Tensor>& parts, const std::vector<double>& w) {
      Tensor acc = scale(parts[0], w[0]);
      for (std::size_t m = 1; m < parts.size(); ++m) acc = add(acc, scale(parts[m], w[m]));
      return acc;
    };
    const std::vector<double> uniform(members.size(), 1.0 / static_cast<double>(members.size()));
    const std::vector<double> quantified = quantification_weights(probabilities);

    struct Stage {
      const char* name;
      Tensor map;
      const ClassifierHead* head;
    };
    const std::vector<Stage> stages{
        {"baseline", sample_map, &model.head()},
        {"ip", integrate_maps(raw, uniform), &model.head2()},
        {"ip_l", integrate_maps(localized, uniform), &model.head2()},
        {"ip_l_q", integrate_maps(localized, quantified), &model.head2()},
    };
    for (const auto& stage : stages) {
      std::size_t row = identity;
      if (stage.head == &model.head2() && !refs[r].training) {
        row = argmax_row(classify(pooled_neck(stage.map, model, gem_p), *stage.head));
      }
      std::size_t degenerate = 0;
      const Localization loc = localize(FeatureMap{stage.map, rec.pid, static_cast<int>(view)},
                                        stage.head->row(static_cast<int>(row)).detach(),
                                        &degenerate);
      const fs::path path = out / (std::to_string(rec.pid) + "_" + std::to_string(view) + "_" +
                                   stage.name + ".pgm");
      write_pgm(path, loc.cam.values, comment);
      if (degenerate) {
        err << "notice: degenerate CAM for pid " << rec.pid << " view " << view << " stage "
            << stage.name << " (no positive activation); wrote an all-zero map\n";
      }
      written.push_back(path);
    }
    log << "sample " << options.samples[r] << ": pid " << rec.pid << " view " << view << " -> "
        << stages.size() << " maps\n";
  }
  return written;
}

}  // namespace mvi2p
