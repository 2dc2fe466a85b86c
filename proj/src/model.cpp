#include "mvi2p/model.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mvi2p/rng.hpp"

namespace mvi2p {

namespace {
constexpr std::size_t kKernel = 3;
constexpr std::size_t kPad = 1;
}  // namespace

std::pair<std::size_t, std::size_t> BackboneConfig::output_extent() const {
  std::size_t h = height, w = width;
  for (auto s : strides) {
    h = (h + 2 * kPad - kKernel) / s + 1;
    w = (w + 2 * kPad - kKernel) / s + 1;
  }
  return {h, w};
}

void BackboneConfig::validate() const {
  if (stage_channels.empty() || stage_channels.size() != strides.size()) {
    throw std::invalid_argument("backbone: stage_channels and strides must be non-empty and equal length");
  }
  for (auto s : strides)
    if (s < 1) throw std::invalid_argument("backbone: strides must be >= 1");
  for (auto c : stage_channels)
    if (c < 1) throw std::invalid_argument("backbone: stage channels must be >= 1");
  const auto [h, w] = output_extent();
  if (h < 4 || w < 2) {
    throw std::invalid_argument("backbone: feature map " + std::to_string(h) + "x" +
                                std::to_string(w) + " is smaller than 4x2");
  }
}

void LossConfig::validate() const {
  if (!(label_smoothing_epsilon >= 0.0 && label_smoothing_epsilon < 1.0)) {
    throw std::invalid_argument("loss: label smoothing epsilon must lie in [0,1)");
  }
  if (!(gem_p >= 1.0)) throw std::invalid_argument("loss: gem_p must be >= 1");
  if (!(lambda >= 0.0)) throw std::invalid_argument("loss: lambda must be >= 0");
  if (views_per_group < 1) throw std::invalid_argument("loss: M must be >= 1");
}

ClassifierHead::ClassifierHead(std::size_t num_identities, std::size_t channels,
                               std::uint64_t seed, double stddev)
    : weight(Shape{num_identities, channels}, 0.0, true) {
  Rng rng(seed);
  for (auto& v : weight.mutable_data()) v = stddev * rng.normal();
}

Tensor ClassifierHead::row(int identity) const {
  if (identity < 0 || static_cast<std::size_t>(identity) >= num_identities()) {
    throw std::out_of_range("classifier: identity " + std::to_string(identity) + " outside [0," +
                            std::to_string(num_identities()) + ")");
  }
  const std::size_t idx = static_cast<std::size_t>(identity);
  return reshape(index_select(weight, std::span<const std::size_t>(&idx, 1)), Shape{channels()});
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  std::size_t in = config_.channels;
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    const std::size_t out = config_.stage_channels[s];
    Tensor kernel(Shape{out, in, kKernel, kKernel}, 0.0, true);
    // He-normal, fan-in mode.
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * kKernel * kKernel));
    for (auto& v : kernel.mutable_data()) v = stddev * rng.normal();
    stages_.push_back(Stage{std::move(kernel), BatchNormState(out), config_.strides[s]});
    in = out;
  }
}

Tensor Backbone::forward(const Tensor& images, BatchNormMode mode) {
  if (images.dim() != 4 || images.size(1) != config_.channels || images.size(2) != config_.height ||
      images.size(3) != config_.width) {
    throw std::invalid_argument("backbone: expected [N," + std::to_string(config_.channels) + "," +
                                std::to_string(config_.height) + "," +
                                std::to_string(config_.width) + "] images, got " +
                                shape_str(images.shape()));
  }
  Tensor x = images;
  for (auto& stage : stages_) {
    x = relu(batch_norm(conv2d(x, stage.kernel, stage.stride, kPad), stage.norm, mode));
  }
  return x;
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (const auto& s : stages_) {
    out.push_back(s.kernel);
    out.push_back(s.norm.gamma);
    out.push_back(s.norm.beta);
  }
  return out;
}

ReidModel::ReidModel(const BackboneConfig& backbone, std::size_t num_identities,
                     std::uint64_t seed)
    : backbone_(backbone, mix_seed({seed, 1})),
      neck_(backbone.feature_channels()),
      head_(num_identities, backbone.feature_channels(), mix_seed({seed, 2})),
      head2_(num_identities, backbone.feature_channels(), mix_seed({seed, 3})) {
  if (num_identities < 1) throw std::invalid_argument("model: need at least one identity");
}

std::vector<Tensor> ReidModel::parameters() const {
  auto out = backbone_.parameters();
  out.push_back(neck_.gamma);
  out.push_back(neck_.beta);
  out.push_back(head_.weight);
  out.push_back(head2_.weight);
  return out;
}

std::size_t ReidModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::vector<ReidModel::NamedBuffer> ReidModel::buffers() {
  std::vector<NamedBuffer> out;
  auto add_norm = [&out](const std::string& prefix, BatchNormState& bn) {
    const Shape c{bn.channels()};
    out.push_back({prefix + ".gamma", c, bn.gamma.mutable_data()});
    out.push_back({prefix + ".beta", c, bn.beta.mutable_data()});
    out.push_back({prefix + ".running_mean", c, bn.running_mean});
    out.push_back({prefix + ".running_var", c, bn.running_var});
  };
  auto& stages = backbone_.stages();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = "backbone.stage" + std::to_string(s);
    out.push_back({prefix + ".kernel", stages[s].kernel.shape(), stages[s].kernel.mutable_data()});
    add_norm(prefix + ".norm", stages[s].norm);
  }
  add_norm("neck", neck_);
  out.push_back({"head.weight", head_.weight.shape(), head_.weight.mutable_data()});
  out.push_back({"head2.weight", head2_.weight.shape(), head2_.weight.mutable_data()});
  return out;
}

// ---------------------------------------------------------------------------

FeatureMap extract_features(const Tensor& image, Backbone& backbone, int person_id,
                            int view_index) {
  const auto& cfg = backbone.config();
  if (image.shape() != Shape{cfg.channels, cfg.height, cfg.width}) {
    throw std::invalid_argument("extract_features: expected image " +
                                shape_str({cfg.channels, cfg.height, cfg.width}) + ", got " +
                                shape_str(image.shape()));
  }
  Tensor batch = reshape(image, Shape{1, cfg.channels, cfg.height, cfg.width});
  Tensor maps = backbone.forward(batch, BatchNormMode::Eval);
  Shape s{maps.size(1), maps.size(2), maps.size(3)};
  return FeatureMap{reshape(maps, std::move(s)), person_id, view_index};
}

FeatureVector gem_pool(const FeatureMap& map, double p) {
  const auto& s = map.values.shape();
  Tensor batched = reshape(map.values, Shape{1, s[0], s[1], s[2]});
  return FeatureVector{reshape(gem_pool(batched, p), Shape{s[0]}), map.person_id,
                       VectorStage::Pooled};
}

Tensor neck(const Tensor& pooled, BatchNormState& state, BatchNormMode mode) {
  if (pooled.dim() != 2) {
    throw std::invalid_argument("neck: expected [N,C] pooled vectors, got " +
                                shape_str(pooled.shape()));
  }
  return batch_norm(pooled, state, mode);
}

FeatureVector neck(const FeatureVector& pooled, BatchNormState& state) {
  if (pooled.stage != VectorStage::Pooled) {
    throw std::invalid_argument("neck: input must be a pooled-stage vector");
  }
  const std::size_t c = pooled.values.numel();
  Tensor out = neck(reshape(pooled.values, Shape{1, c}), state, BatchNormMode::Eval);
  return FeatureVector{reshape(out, Shape{c}), pooled.person_id, VectorStage::Neck};
}

Tensor classify(const Tensor& features, const ClassifierHead& head) {
  if (features.dim() == 1) {
    const std::size_t c = features.numel();
    Tensor logits = linear(reshape(features, Shape{1, c}), head.weight);
    return reshape(softmax(logits, 1), Shape{head.num_identities()});
  }
  return softmax(linear(features, head.weight), 1);
}

Tensor identity_loss(const Tensor& probabilities, std::span<const int> labels, double epsilon) {
  if (probabilities.dim() != 2) {
    throw std::invalid_argument("identity_loss: expected [N,K] probabilities, got " +
                                shape_str(probabilities.shape()));
  }
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("identity_loss: epsilon must lie in [0,1)");
  }
  const std::size_t n = probabilities.size(0), k = probabilities.size(1);
  if (labels.size() != n) throw std::invalid_argument("identity_loss: one label per row required");
  std::vector<double> target(n * k, epsilon / static_cast<double>(k));
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw std::out_of_range("identity_loss: label " + std::to_string(labels[r]) +
                              " outside [0," + std::to_string(k) + ")");
    }
    target[r * k + static_cast<std::size_t>(labels[r])] += 1.0 - epsilon;
  }
  // Without smoothing only the true-class terms exist, so off-target
  // probabilities may underflow to zero.
  if (epsilon == 0.0) {
    return scale(sum(log(pick(probabilities, labels))), -1.0 / static_cast<double>(n));
  }
  Tensor q(Shape{n, k}, std::move(target));
  return scale(sum(mul(q, log(probabilities))), -1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kCheckpointMagic = "mvi2p-checkpoint";
constexpr int kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, ReidModel& model,
                     const CheckpointMeta& meta) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("checkpoint: cannot write " + path.string());
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "config_hash " << meta.config_hash << '\n';
  os << "corpus_hash " << meta.corpus_hash << '\n';
  os << "config_lines " << meta.config_lines.size() << '\n';
  for (const auto& line : meta.config_lines) os << line << '\n';
  char buf[64];
  for (const auto& b : model.buffers()) {
    os << "param " << b.name << ' ' << b.shape.size();
    for (auto d : b.shape) os << ' ' << d;
    os << '\n';
    for (std::size_t i = 0; i < b.values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%a", b.values[i]);
      os << (i ? " " : "") << buf;
    }
    os << '\n';
  }
  os << "end\n";
  if (!os) throw CheckpointError("checkpoint: write failed for " + path.string());
}

namespace {

CheckpointMeta read_meta(std::istream& is, const std::filesystem::path& path) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kCheckpointMagic) {
    throw CheckpointError("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointMeta meta;
  std::string key;
  std::size_t lines = 0;
  if (!(is >> key >> meta.config_hash) || key != "config_hash") {
    throw CheckpointError("checkpoint: missing config_hash");
  }
  if (!(is >> key >> meta.corpus_hash) || key != "corpus_hash") {
    throw CheckpointError("checkpoint: missing corpus_hash");
  }
  if (!(is >> key >> lines) || key != "config_lines" || lines > 10000) {
    throw CheckpointError("checkpoint: missing config listing");
  }
  is >> std::ws;
  for (std::size_t i = 0; i < lines; ++i) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint: truncated config listing");
    meta.config_lines.push_back(line);
  }
  return meta;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  return read_meta(is, path);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, ReidModel& model) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  CheckpointMeta meta = read_meta(is, path);
  std::string key;
  auto buffers = model.buffers();
  // Parse everything first so a bad file leaves the model untouched.
  std::vector<std::vector<double>> staged;
  for (const auto& b : buffers) {
    std::string tag, name;
    std::size_t rank = 0;
    if (!(is >> tag >> name >> rank) || tag != "param" || rank > 8) {
      throw CheckpointError("checkpoint: parse error before parameter " + b.name);
    }
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(is >> d)) throw CheckpointError("checkpoint: parse error in shape of " + name);
    }
    if (name != b.name || shape != b.shape) {
      throw CheckpointError("checkpoint: expected " + b.name + shape_str(b.shape) + ", found " +
                            name + shape_str(shape));
    }
    std::vector<double> values(b.values.size());
    std::string token;
    for (auto& v : values) {
      if (!(is >> token)) throw CheckpointError("checkpoint: truncated values for " + name);
      char* end = nullptr;
      v = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') {
        throw CheckpointError("checkpoint: parse error in values of " + name + ": '" + token + "'");
      }
    }
    staged.push_back(std::move(values));
  }
  if (!(is >> key) || key != "end") throw CheckpointError("checkpoint: missing end marker");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    std::copy(staged[i].begin(), staged[i].end(), buffers[i].values.begin());
  }
  return meta;
}

}  // namespace mvi2p
