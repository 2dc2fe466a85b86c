#pragma once

// Multi-view feature integration and propagation: CAM localization,
// probability-weighted quantification, summation of the weighted maps into
// one integrated map, and the L2 distillation of the integrated descriptor
// back into each single-view descriptor.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvi2p/model.hpp"
#include "mvi2p/tensor.hpp"

namespace mvi2p {

/// Rectified, max-normalized class activation map of one view.
struct CamMap {
  Tensor values;  // [H,W], entries in [0,1]
  int source_view = 0;
  int identity = -1;
  bool degenerate = false;  // raw map had no positive entry; values are all zero
};

struct Localization {
  CamMap cam;
  FeatureMap localized;  // cam broadcast over channels times the input map
};

/// CAM of `map` under classifier row `theta` ([C]), then the gated map.
/// A map without positive evidence yields an all-zero CAM and bumps
/// `*degenerate_counter`.
Localization localize(const FeatureMap& map, const Tensor& theta,
                      std::size_t* degenerate_counter = nullptr);

struct BatchLocalization {
  Tensor cams;       // [N,H,W]
  Tensor localized;  // [N,C,H,W]
  std::size_t degenerate = 0;
};

/// Batched localize with one classifier row per map: maps [N,C,H,W], theta [N,C].
BatchLocalization localize_batch(const Tensor& maps, const Tensor& theta);

/// Softmax over the probabilities of one view group.
std::vector<double> quantification_weights(std::span<const double> probabilities);

struct Quantification {
  std::vector<double> probabilities;  // p^l per member, treated as constants
  std::vector<double> weights;        // softmax of the probabilities
  std::vector<Tensor> weighted_maps;  // weight * localized map, on the tape
};

/// Scores each localized vector with `head` on the true identity and weights
/// the localized maps accordingly.
Quantification quantify(std::span<const FeatureVector> localized_vectors,
                        std::span<const FeatureMap> localized_maps, const ClassifierHead& head,
                        int identity);

struct ViewMember {
  FeatureMap map;
  FeatureMap localized;
  FeatureVector localized_vector;
  double probability = 0.0;
  double weight = 0.0;
  Tensor weighted_map;
};

struct ViewGroup {
  int identity = -1;
  std::vector<ViewMember> members;
  Tensor integrated_map;  // [C,H,W]
  std::size_t degenerate_cams = 0;
};

/// Localizes and quantifies M same-identity maps with the baseline head and
/// eval-mode neck. Integration is left to integrate().
ViewGroup build_view_group(std::span<const FeatureMap> maps, ReidModel& model, double gem_p);

struct Integration {
  FeatureVector integrated_vector;  // neck stage
  Tensor l_id2;
};

/// Sums the weighted maps of `group`, pools it, runs the eval-mode neck and
/// scores it with head2.
Integration integrate(ViewGroup& group, const ClassifierHead& head2, BatchNormState& neck_state,
                      double gem_p, double epsilon);

/// ||teacher - student||_2 for one pair of [C] vectors. With `detach_teacher`
/// the teacher side receives no gradient.
Tensor propagate(const Tensor& teacher, const Tensor& student, bool detach_teacher = true);

struct LossBreakdown {
  double l_id = 0.0;
  double l_id2 = 0.0;
  double l_kd = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// total = l_id + l_id2 + lambda * l_kd. Negative or non-finite parts are rejected.
LossBreakdown total_loss(double l_id, double l_id2, double l_kd, double lambda);
/// Same combination on the tape.
Tensor total_objective(const Tensor& l_id, const Tensor& l_id2, const Tensor& l_kd, double lambda);

/// Splits an identity-ordered batch (runs of `per_identity` equal labels)
/// into disjoint groups of `views` consecutive images.
std::vector<std::vector<std::size_t>> group_views(std::span<const int> labels,
                                                  std::size_t per_identity, std::size_t views);

// ---------------------------------------------------------------------------
// Batched training objective
// ---------------------------------------------------------------------------

/// Cumulative ablation rows: Baseline, +IP, +L, +Q.
enum class Variant { Baseline, IP, IP_L, IP_L_Q };

struct VariantFlags {
  bool integrate = false;
  bool localize = false;
  bool quantify = false;
};

VariantFlags variant_flags(Variant v);
std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
inline constexpr Variant kAllVariants[] = {Variant::Baseline, Variant::IP, Variant::IP_L,
                                           Variant::IP_L_Q};

struct ObjectiveOptions {
  Variant variant = Variant::IP_L_Q;
  double epsilon = 0.1;
  double gem_p = 3.0;
  double lambda = 0.007;
  bool detach_teacher = true;
  BatchNormMode neck_mode = BatchNormMode::Train;
  // Overrides used by gradient checks so that the constant-treated
  // quantities stay fixed while parameters are perturbed.
  const std::vector<double>* frozen_weights = nullptr;  // one per image
  const Tensor* frozen_teacher = nullptr;               // [G,C]
};

struct Objective {
  Tensor l_id;
  Tensor l_id2;
  Tensor l_kd;
  Tensor total;
  LossBreakdown breakdown;
  std::vector<double> weights;  // per image, 1/M when quantification is off
  Tensor teacher;               // [G,C] integrated neck vectors (detached)
  std::size_t degenerate_cams = 0;
};

struct ObjectiveModules {
  BatchNormState& neck;
  const ClassifierHead& head;
  const ClassifierHead& head2;
};

/// Full training loss from backbone maps [N,C,H,W] of an identity-ordered
/// batch. The baseline neck runs in `options.neck_mode`; the localized and
/// integrated branches use batch statistics without touching running stats.
Objective compute_objective(const Tensor& maps, std::span<const int> labels,
                            const std::vector<std::vector<std::size_t>>& groups,
                            ObjectiveModules modules, const ObjectiveOptions& options);

}  // namespace mvi2p
