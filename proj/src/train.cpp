#include "mvi2p/train.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mvi2p/multiview.hpp"
#include "mvi2p/ops.hpp"
#include "mvi2p/optim.hpp"
#include "mvi2p/rng.hpp"

namespace mvi2p {

namespace {

constexpr std::uint64_t kSamplerStream = 0x5a3b1e;

std::string fmt(double v) {
  // Shortest representation that round-trips.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

Tensor stack_images(const std::vector<SampleRecord>& records,
                    std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: no indices");
  const Shape& s = records.at(indices.front()).image.shape();
  const std::size_t per = shape_numel(s);
  std::vector<double> values;
  values.reserve(per * indices.size());
  for (auto i : indices) {
    const auto& img = records.at(i).image;
    if (img.shape() != s) throw std::invalid_argument("stack_images: mixed image shapes");
    values.insert(values.end(), img.data().begin(), img.data().end());
  }
  return Tensor({indices.size(), s[0], s[1], s[2]}, std::move(values));
}

ReidModel build_model(const RunConfig& config, int num_train_identities) {
  return ReidModel(config.backbone_config(), static_cast<std::size_t>(num_train_identities),
                   config.seed);
}

std::vector<EpochTrace> train_model(ReidModel& model, const DatasetSplit& split,
                                    const RunConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const std::size_t batch = config.P * config.K;
  const std::size_t steps = split.train.size() / batch;
  if (steps == 0) throw std::invalid_argument("train: training set smaller than one P*K batch");

  Rng sampler(mix_seed({config.seed, kSamplerStream}));
  Adam adam(model.parameters());
  const auto schedule = config.schedule();

  ObjectiveOptions options;
  options.variant = config.variant;
  options.epsilon = config.epsilon;
  options.gem_p = config.gem_p;
  options.lambda = config.lambda;
  options.detach_teacher = config.detach_teacher;
  options.neck_mode = BatchNormMode::Train;
  const bool integrates = variant_flags(config.variant).integrate;

  std::vector<EpochTrace> traces;
  std::size_t global_step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochTrace trace;
    trace.epoch = epoch + 1;
    trace.lr = lr_at(schedule, epoch);
    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      const auto indices = pk_sample(split.train, config.P, config.K, sampler);
      std::vector<int> labels;
      labels.reserve(indices.size());
      for (auto i : indices) labels.push_back(split.train[i].pid);

      adam.zero_grad();
      Tensor maps = model.backbone().forward(stack_images(split.train, indices),
                                             BatchNormMode::Train);
      const auto groups = group_views(labels, config.K, config.M);
      ObjectiveModules modules{model.neck(), model.head(), model.head2()};
      Objective obj = compute_objective(maps, labels, groups, modules, options);

      const double total = obj.total.item();
      if (!std::isfinite(total) || !std::isfinite(obj.l_id.item()) ||
          !std::isfinite(obj.l_id2.item()) || !std::isfinite(obj.l_kd.item())) {
        throw TrainingError("train: non-finite loss at step " + std::to_string(global_step),
                            global_step);
      }
      obj.total.backward();
      adam.step(trace.lr);

      trace.l_id += obj.breakdown.l_id;
      trace.l_id2 += obj.breakdown.l_id2;
      trace.l_kd += obj.breakdown.l_kd;
      trace.total += obj.breakdown.total;
      if (integrates) {
        // l_kd sums member distances per group; rescale to a per-image mean.
        trace.mean_distance += obj.breakdown.l_kd * static_cast<double>(groups.size()) /
                               static_cast<double>(labels.size());
      }
      trace.degenerate_cams += obj.degenerate_cams;
      ++trace.steps;
    }
    const double n = static_cast<double>(trace.steps);
    trace.l_id /= n;
    trace.l_id2 /= n;
    trace.l_kd /= n;
    trace.total /= n;
    trace.mean_distance /= n;
    traces.push_back(trace);
    if (on_epoch) on_epoch(trace);
  }
  return traces;
}

std::vector<std::vector<double>> extract_descriptors(ReidModel& model,
                                                     const std::vector<SampleRecord>& records,
                                                     double gem_p, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("extract_descriptors: batch must be >= 1");
  std::vector<std::vector<double>> out;
  out.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += batch) {
    const std::size_t stop = std::min(records.size(), start + batch);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor maps = model.backbone().forward(stack_images(records, idx), BatchNormMode::Eval);
    Tensor f = neck(gem_pool(maps, gem_p), model.neck(), BatchNormMode::Eval);
    const std::size_t c = f.size(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.emplace_back(f.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                       f.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
    }
  }
  return out;
}

RetrievalMetrics evaluate_model(ReidModel& model, const DatasetSplit& split, double gem_p) {
  RetrievalIndex index;
  index.features = extract_descriptors(model, split.gallery, gem_p);
  for (const auto& r : split.gallery) {
    index.pids.push_back(r.pid);
    index.camids.push_back(r.camid);
  }
  const auto queries = extract_descriptors(model, split.query, gem_p);
  std::vector<int> qp, qc;
  for (const auto& r : split.query) {
    qp.push_back(r.pid);
    qc.push_back(r.camid);
  }
  return evaluate_retrieval(queries, qp, qc, index);
}

TrainRun run_training(const DatasetSplit& split, const RunConfig& config,
                      const EpochCallback& on_epoch) {
  TrainRun run;
  ReidModel model = build_model(config, split.num_train_identities);
  run.traces = train_model(model, split, config, on_epoch);
  run.metrics = evaluate_model(model, split, config.gem_p);
  run.config_hash = config.hash();
  run.corpus_hash = hex64(corpus_hash(split));
  return run;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

std::string metrics_json(const RunConfig& config, const std::string& corpus_hash,
                         const RetrievalMetrics& metrics, const std::vector<EpochTrace>& traces,
                         const std::string& checkpoint_hash) {
  nlohmann::ordered_json doc;
  nlohmann::ordered_json echo;
  for (const auto& key : RunConfig::keys()) echo[key] = config.get(key);
  doc["config"] = echo;
  doc["config_hash"] = config.hash();
  doc["corpus_hash"] = corpus_hash;
  doc["checkpoint_hash"] = checkpoint_hash;
  doc["seed"] = config.seed;
  doc["variant"] = variant_name(config.variant);
  doc["rank1"] = metrics.rank1;
  doc["rank5"] = metrics.rank5;
  doc["rank10"] = metrics.rank10;
  doc["map"] = metrics.map;
  doc["cmc"] = metrics.curve.values;
  doc["evaluated_queries"] = metrics.evaluated_queries;
  doc["excluded_queries"] = metrics.excluded_queries;
  auto trace_rows = nlohmann::ordered_json::array();
  for (const auto& t : traces) {
    trace_rows.push_back({{"epoch", t.epoch},
                          {"lr", t.lr},
                          {"l_id", t.l_id},
                          {"l_id2", t.l_id2},
                          {"l_kd", t.l_kd},
                          {"total", t.total},
                          {"mean_distance", t.mean_distance},
                          {"degenerate_cams", t.degenerate_cams}});
  }
  doc["loss_trace"] = trace_rows;
  return doc.dump(2) + "\n";
}

std::string loss_trace_csv(const std::vector<EpochTrace>& traces, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\n";
  out += "epoch,lr,l_id,l_id2,l_kd,total,mean_distance,degenerate_cams\n";
  for (const auto& t : traces) {
    out += std::to_string(t.epoch) + "," + fmt(t.lr) + "," + fmt(t.l_id) + "," + fmt(t.l_id2) +
           "," + fmt(t.l_kd) + "," + fmt(t.total) + "," + fmt(t.mean_distance) + "," +
           std::to_string(t.degenerate_cams) + "\n";
  }
  return out;
}

void append_results_ledger(const std::filesystem::path& path, const RunConfig& config,
                           const RetrievalMetrics& metrics) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot append to " + path.string());
  if (fresh) os << "config_hash,variant,seed,epochs,lambda,M,rank1,rank5,rank10,map\n";
  os << config.hash() << ',' << variant_name(config.variant) << ',' << config.seed << ','
     << config.epochs << ',' << fmt(config.lambda) << ',' << config.M << ',' << fmt(metrics.rank1)
     << ',' << fmt(metrics.rank5) << ',' << fmt(metrics.rank10) << ',' << fmt(metrics.map) << '\n';
}

RunConfig variant_config(const RunConfig& base, Variant variant, std::uint64_t seed) {
  RunConfig c = base;
  c.variant = variant;
  c.seed = seed;
  if (variant == Variant::Baseline) c.lambda = 0.0;
  return c;
}

std::vector<AblationRow> ablation_run(const DatasetSplit& split, const RunConfig& base,
                                      std::span<const std::uint64_t> seeds,
                                      std::span<const Variant> variants,
                                      const RowCallback& on_row) {
  if (seeds.empty()) throw std::invalid_argument("ablation: need at least one seed");
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    for (auto seed : seeds) {
      const TrainRun run = run_training(split, variant_config(base, v, seed));
      AblationRow row;
      row.variant = variant_name(v);
      row.seed = seed;
      row.metrics = run.metrics;
      row.first_distance = run.traces.front().mean_distance;
      row.final_distance = run.traces.back().mean_distance;
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  for (const auto& row : rows) {
    if (std::any_of(out.begin(), out.end(),
                    [&](const AblationSummary& s) { return s.variant == row.variant; })) {
      continue;
    }
    std::vector<double> r1, map;
    for (const auto& r : rows) {
      if (r.variant != row.variant) continue;
      r1.push_back(r.metrics.rank1);
      map.push_back(r.metrics.map);
    }
    out.push_back({row.variant, median(r1), median(map)});
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,seed,rank1,rank5,rank10,map\n";
  for (const auto& r : rows) {
    out += r.variant + "," + std::to_string(r.seed) + "," + fmt(r.metrics.rank1) + "," +
           fmt(r.metrics.rank5) + "," + fmt(r.metrics.rank10) + "," + fmt(r.metrics.map) + "\n";
  }
  return out;
}

std::vector<SweepRow> sweep_run(const DatasetSplit& split, const RunConfig& base,
                                std::span<const std::uint64_t> seeds,
                                std::span<const double> lambdas,
                                std::span<const std::size_t> views,
                                const std::function<void(const SweepRow&)>& on_row) {
  if (seeds.empty()) throw std::invalid_argument("sweep: need at least one seed");
  std::vector<SweepRow> rows;
  auto run_one = [&](const std::string& name, double value, RunConfig cfg) {
    for (auto seed : seeds) {
      cfg.seed = seed;
      SweepRow row{name, value, seed, run_training(split, cfg).metrics};
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  };
  for (double lambda : lambdas) {
    RunConfig cfg = base;
    cfg.variant = Variant::IP_L_Q;
    cfg.lambda = lambda;
    run_one("lambda", lambda, cfg);
  }
  for (std::size_t m : views) {
    RunConfig cfg = base;
    cfg.variant = Variant::IP_L_Q;
    cfg.M = m;
    run_one("M", static_cast<double>(m), cfg);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "parameter,value,seed,rank1,rank5,rank10,map\n";
  for (const auto& r : rows) {
    out += r.parameter + "," + fmt(r.value) + "," + std::to_string(r.seed) + "," +
           fmt(r.metrics.rank1) + "," + fmt(r.metrics.rank5) + "," + fmt(r.metrics.rank10) + "," +
           fmt(r.metrics.map) + "\n";
  }
  return out;
}

}  // namespace mvi2p
