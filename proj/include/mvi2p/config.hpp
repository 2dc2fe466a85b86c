#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mvi2p/data.hpp"
#include "mvi2p/model.hpp"
#include "mvi2p/multiview.hpp"
#include "mvi2p/optim.hpp"

namespace mvi2p {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Every tunable of a run. Defaults follow the full training protocol
/// (120 epochs, lr 3e-4, decays at 40 and 70). desk_scale() is the 30-epoch
/// preset (decays at 10 and 17, lr 3e-3) for a from-scratch desk-sized backbone.
struct RunConfig {
  // corpus
  int num_ids = 50;
  int imgs_per_id = 20;
  int num_cams = 4;
  int queries_per_id = 4;
  double occlusion_prob_train = 0.5;
  double occlusion_prob_query = 1.0;
  double occlusion_prob_gallery = 0.3;
  std::uint64_t data_seed = 0;
  std::size_t image_height = 64;
  std::size_t image_width = 32;

  // model
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> stage_strides{2, 2, 2};

  // objective
  std::size_t P = 8;
  std::size_t K = 8;
  std::size_t M = 4;
  double lambda = 0.007;
  double epsilon = 0.1;
  double gem_p = 3.0;
  Variant variant = Variant::IP_L_Q;
  bool detach_teacher = true;

  // optimisation
  int epochs = 120;
  double lr = 3e-4;
  std::vector<int> lr_decay_epochs{40, 70};
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;

  // io
  std::string output_dir = "runs/default";
  std::string corpus;  // corpus directory; empty means generate in memory

  static RunConfig desk_scale();

  void validate() const;

  SplitConfig split_config() const;
  BackboneConfig backbone_config() const;
  LossConfig loss_config() const;
  LrSchedule schedule() const;

  /// Sets one field from its textual form. Unknown keys and bad values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Parses `key = value` lines; '#' starts a comment.
  void apply_text(const std::string& text, const std::string& source = "<text>");
  void apply_file(const std::filesystem::path& path);
  void apply(const std::map<std::string, std::string>& overrides);

  /// Fully resolved `key=value` listing, one per line, in keys() order.
  std::string to_text() const;
  /// Hash of to_text() without `output_dir` and `corpus`, so relocated runs match.
  std::string hash() const;
};

}  // namespace mvi2p
