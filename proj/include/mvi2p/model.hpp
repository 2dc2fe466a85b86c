#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvi2p/ops.hpp"
#include "mvi2p/tensor.hpp"

namespace mvi2p {

/// Plain strided CNN: each stage is conv3x3(stride) -> BN -> ReLU.
struct BackboneConfig {
  std::size_t channels = 3;
  std::size_t height = 64;
  std::size_t width = 32;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> strides{2, 2, 2};

  std::size_t feature_channels() const { return stage_channels.back(); }
  /// Spatial extent (H, W) of the final feature map.
  std::pair<std::size_t, std::size_t> output_extent() const;
  void validate() const;
};

struct LossConfig {
  double label_smoothing_epsilon = 0.1;
  double gem_p = 3.0;
  double lambda = 0.007;
  std::size_t views_per_group = 4;  // M

  void validate() const;
};

/// One image's backbone output. `values` is channel-major [C,H,W].
struct FeatureMap {
  Tensor values;
  int person_id = -1;
  int view_index = 0;

  std::size_t channels() const { return values.size(0); }
  std::size_t height() const { return values.size(1); }
  std::size_t width() const { return values.size(2); }
  double at(std::size_t h, std::size_t w, std::size_t c) const {
    return values[(c * height() + h) * width() + w];
  }
};

enum class VectorStage { Pooled, Neck };

struct FeatureVector {
  Tensor values;  // [C]
  int person_id = -1;
  VectorStage stage = VectorStage::Pooled;
};

/// Bias-free identity classifier; row k is the CAM weight vector of identity k.
struct ClassifierHead {
  Tensor weight;  // [num_identities, C]

  ClassifierHead() = default;
  ClassifierHead(std::size_t num_identities, std::size_t channels, std::uint64_t seed,
                 double stddev = 0.001);

  std::size_t num_identities() const { return weight.size(0); }
  std::size_t channels() const { return weight.size(1); }
  /// Row `identity` as a [C] tensor on the tape.
  Tensor row(int identity) const;
};

class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  /// [N,3,H,W] images -> [N,C,H',W'] nonnegative feature maps.
  Tensor forward(const Tensor& images, BatchNormMode mode);

  const BackboneConfig& config() const { return config_; }
  std::vector<Tensor> parameters() const;

  struct Stage {
    Tensor kernel;
    BatchNormState norm;
    std::size_t stride;
  };
  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  BackboneConfig config_;
  std::vector<Stage> stages_;
};

/// Backbone, BN neck and the two identity heads (W for the baseline branch,
/// W2 for the integrated branch).
class ReidModel {
 public:
  ReidModel(const BackboneConfig& backbone, std::size_t num_identities, std::uint64_t seed);

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  BatchNormState& neck() { return neck_; }
  const BatchNormState& neck() const { return neck_; }
  ClassifierHead& head() { return head_; }
  const ClassifierHead& head() const { return head_; }
  ClassifierHead& head2() { return head2_; }
  const ClassifierHead& head2() const { return head2_; }

  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Named views of every parameter and running statistic, in a fixed order.
  struct NamedBuffer {
    std::string name;
    Shape shape;
    std::span<double> values;
  };
  std::vector<NamedBuffer> buffers();

 private:
  Backbone backbone_;
  BatchNormState neck_;
  ClassifierHead head_;
  ClassifierHead head2_;
};

// ---------------------------------------------------------------------------
// Baseline branch operations
// ---------------------------------------------------------------------------

/// Single image [3,H,W] -> feature map, using running BN statistics.
FeatureMap extract_features(const Tensor& image, Backbone& backbone, int person_id = -1,
                            int view_index = 0);

FeatureVector gem_pool(const FeatureMap& map, double p);

/// Neck BN over a batch of pooled vectors [N,C].
Tensor neck(const Tensor& pooled, BatchNormState& state, BatchNormMode mode);
/// Single-vector neck in eval mode.
FeatureVector neck(const FeatureVector& pooled, BatchNormState& state);

/// softmax(W f) for a [C] vector or a [N,C] batch.
Tensor classify(const Tensor& features, const ClassifierHead& head);

/// Batch-averaged cross-entropy of [N,K] probabilities against the
/// label-smoothed target.
Tensor identity_loss(const Tensor& probabilities, std::span<const int> labels, double epsilon);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
  std::string config_hash;
  std::string corpus_hash;
  std::vector<std::string> config_lines;  // resolved key=value listing of the run
};

/// Text listing of every buffer with hexfloat values (bit-exact round trip).
void save_checkpoint(const std::filesystem::path& path, ReidModel& model,
                     const CheckpointMeta& meta);
/// Header only; lets a caller rebuild the model before loading weights.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
/// Loads into `model`; names and shapes must match.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, ReidModel& model);

}  // namespace mvi2p
