#include "mvi2p/multiview.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvi2p {

Localization localize(const FeatureMap& map, const Tensor& theta, std::size_t* degenerate_counter) {
  const std::size_t c = map.channels(), h = map.height(), w = map.width();
  if (theta.numel() != c) {
    throw std::invalid_argument("localize: theta has " + std::to_string(theta.numel()) +
                                " entries for " + std::to_string(c) + " channels");
  }
  auto batch = localize_batch(reshape(map.values, Shape{1, c, h, w}), reshape(theta, Shape{1, c}));
  if (degenerate_counter) *degenerate_counter += batch.degenerate;
  CamMap cam{reshape(batch.cams, Shape{h, w}), map.view_index, map.person_id,
             batch.degenerate > 0};
  FeatureMap localized{reshape(batch.localized, Shape{c, h, w}), map.person_id, map.view_index};
  return Localization{std::move(cam), std::move(localized)};
}

BatchLocalization localize_batch(const Tensor& maps, const Tensor& theta) {
  for (double v : maps.data()) {
    if (v < 0.0) throw std::invalid_argument("localize: feature map has negative values");
  }
  BatchLocalization out;
  Tensor raw = channel_weighted_sum(maps, theta);
  out.cams = max_normalize(relu(raw), &out.degenerate);
  out.localized = spatial_gate(out.cams, maps);
  return out;
}

std::vector<double> quantification_weights(std::span<const double> probabilities) {
  if (probabilities.empty()) throw std::invalid_argument("quantify: empty view group");
  const double mx = *std::max_element(probabilities.begin(), probabilities.end());
  std::vector<double> w(probabilities.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(probabilities[i] - mx);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return w;
}

Quantification quantify(std::span<const FeatureVector> localized_vectors,
                        std::span<const FeatureMap> localized_maps, const ClassifierHead& head,
                        int identity) {
  if (localized_vectors.empty()) throw std::invalid_argument("quantify: empty view group");
  if (localized_vectors.size() != localized_maps.size()) {
    throw std::invalid_argument("quantify: vectors and maps differ in count");
  }
  ClassifierHead frozen;
  frozen.weight = head.weight.detach();
  Quantification q;
  for (const auto& v : localized_vectors) {
    Tensor probs = classify(v.values.detach(), frozen);
    if (identity < 0 || static_cast<std::size_t>(identity) >= probs.numel()) {
      throw std::out_of_range("quantify: identity " + std::to_string(identity) + " not in head");
    }
    q.probabilities.push_back(probs[static_cast<std::size_t>(identity)]);
  }
  q.weights = quantification_weights(q.probabilities);
  for (std::size_t m = 0; m < localized_maps.size(); ++m) {
    q.weighted_maps.push_back(scale(localized_maps[m].values, q.weights[m]));
  }
  return q;
}

ViewGroup build_view_group(std::span<const FeatureMap> maps, ReidModel& model, double gem_p) {
  if (maps.empty()) throw std::invalid_argument("view group: no members");
  ViewGroup group;
  group.identity = maps.front().person_id;
  std::vector<FeatureVector> vectors;
  std::vector<FeatureMap> localized;
  for (const auto& map : maps) {
    if (map.person_id != group.identity) {
      throw std::invalid_argument("view group: members carry different identities");
    }
    auto loc = localize(map, model.head().row(group.identity), &group.degenerate_cams);
    vectors.push_back(neck(gem_pool(loc.localized, gem_p), model.neck()));
    localized.push_back(loc.localized);
    group.members.push_back(ViewMember{map, loc.localized, vectors.back(), 0.0, 0.0, Tensor()});
  }
  auto q = quantify(vectors, localized, model.head(), group.identity);
  for (std::size_t m = 0; m < group.members.size(); ++m) {
    group.members[m].probability = q.probabilities[m];
    group.members[m].weight = q.weights[m];
    group.members[m].weighted_map = q.weighted_maps[m];
  }
  return group;
}

Integration integrate(ViewGroup& group, const ClassifierHead& head2, BatchNormState& neck_state,
                      double gem_p, double epsilon) {
  if (group.members.empty()) throw std::invalid_argument("integrate: empty view group");
  Tensor acc = group.members.front().weighted_map;
  for (std::size_t m = 1; m < group.members.size(); ++m) {
    const Tensor& next = group.members[m].weighted_map;
    if (next.shape() != acc.shape()) {
      throw std::invalid_argument("integrate: member " + std::to_string(m) + " has shape " +
                                  shape_str(next.shape()) + ", expected " +
                                  shape_str(acc.shape()));
    }
    acc = add(acc, next);
  }
  group.integrated_map = acc;
  FeatureMap merged{acc, group.identity, -1};
  FeatureVector vec = neck(gem_pool(merged, gem_p), neck_state);
  const int label = group.identity;
  Tensor probs = classify(vec.values, head2);
  Tensor loss = identity_loss(reshape(probs, Shape{1, probs.numel()}),
                              std::span<const int>(&label, 1), epsilon);
  return Integration{std::move(vec), std::move(loss)};
}

Tensor propagate(const Tensor& teacher, const Tensor& student, bool detach_teacher) {
  if (teacher.numel() != student.numel()) {
    throw std::invalid_argument("propagate: vector lengths differ (" +
                                std::to_string(teacher.numel()) + " vs " +
                                std::to_string(student.numel()) + ")");
  }
  const std::size_t c = student.numel();
  Tensor t = detach_teacher ? teacher.detach() : teacher;
  return reshape(row_l2_distance(reshape(t, Shape{1, c}), reshape(student, Shape{1, c})), Shape{});
}

LossBreakdown total_loss(double l_id, double l_id2, double l_kd, double lambda) {
  for (double v : {l_id, l_id2, l_kd, lambda}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::invalid_argument("total_loss: components must be finite and non-negative");
    }
  }
  return LossBreakdown{l_id, l_id2, l_kd, lambda, (l_id + l_id2) + lambda * l_kd};
}

Tensor total_objective(const Tensor& l_id, const Tensor& l_id2, const Tensor& l_kd, double lambda) {
  return add(add(l_id, l_id2), scale(l_kd, lambda));
}

std::vector<std::vector<std::size_t>> group_views(std::span<const int> labels,
                                                  std::size_t per_identity, std::size_t views) {
  if (views < 1 || per_identity < 1 || per_identity % views != 0) {
    throw std::invalid_argument("group_views: M=" + std::to_string(views) +
                                " must divide K=" + std::to_string(per_identity));
  }
  if (labels.size() % per_identity != 0) {
    throw std::invalid_argument("group_views: batch size is not a multiple of K");
  }
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t start = 0; start < labels.size(); start += per_identity) {
    for (std::size_t i = start; i < start + per_identity; ++i) {
      if (labels[i] != labels[start]) {
        throw std::invalid_argument("group_views: batch is not ordered by identity");
      }
    }
    for (std::size_t g = start; g < start + per_identity; g += views) {
      std::vector<std::size_t> grp(views);
      for (std::size_t m = 0; m < views; ++m) grp[m] = g + m;
      groups.push_back(std::move(grp));
    }
  }
  return groups;
}

// ---------------------------------------------------------------------------

VariantFlags variant_flags(Variant v) {
  switch (v) {
    case Variant::Baseline: return {false, false, false};
    case Variant::IP: return {true, false, false};
    case Variant::IP_L: return {true, true, false};
    case Variant::IP_L_Q: return {true, true, true};
  }
  throw std::invalid_argument("unknown variant");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::IP: return "ip";
    case Variant::IP_L: return "ip_l";
    case Variant::IP_L_Q: return "ip_l_q";
  }
  throw std::invalid_argument("unknown variant");
}

Variant parse_variant(const std::string& name) {
  for (auto v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  if (name == "full") return Variant::IP_L_Q;
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected baseline, ip, ip_l, ip_l_q or full)");
}

namespace {

BatchNormMode branch_mode(std::size_t batch) {
  return batch >= 2 ? BatchNormMode::TrainNoUpdate : BatchNormMode::Eval;
}

}  // namespace

Objective compute_objective(const Tensor& maps, std::span<const int> labels,
                            const std::vector<std::vector<std::size_t>>& groups,
                            ObjectiveModules modules, const ObjectiveOptions& options) {
  if (maps.dim() != 4 || maps.size(0) != labels.size()) {
    throw std::invalid_argument("objective: need one label per map, maps " +
                                shape_str(maps.shape()));
  }
  const std::size_t n = labels.size();
  const auto flags = variant_flags(options.variant);

  Objective out;
  Tensor features = neck(gem_pool(maps, options.gem_p), modules.neck, options.neck_mode);
  out.l_id = smoothed_cross_entropy(linear(features, modules.head.weight), labels, options.epsilon);

  if (!flags.integrate) {
    out.l_id2 = Tensor::scalar(0.0);
    out.l_kd = Tensor::scalar(0.0);
    out.total = total_objective(out.l_id, out.l_id2, out.l_kd, options.lambda);
    out.breakdown = total_loss(out.l_id.item(), 0.0, 0.0, options.lambda);
    return out;
  }

  std::vector<std::size_t> group_of(n, groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw std::invalid_argument("objective: empty view group");
    for (auto i : groups[g]) {
      if (i >= n || group_of[i] != groups.size()) {
        throw std::invalid_argument("objective: view groups must partition the batch");
      }
      if (labels[i] != labels[groups[g].front()]) {
        throw std::invalid_argument("objective: view group mixes identities");
      }
      group_of[i] = g;
    }
  }
  if (std::find(group_of.begin(), group_of.end(), groups.size()) != group_of.end()) {
    throw std::invalid_argument("objective: view groups must cover the batch");
  }

  Tensor localized = maps;
  if (flags.localize) {
    std::vector<std::size_t> rows(labels.begin(), labels.end());
    auto loc = localize_batch(maps, index_select(modules.head.weight, rows));
    localized = loc.localized;
    out.degenerate_cams = loc.degenerate;
  }

  if (options.frozen_weights) {
    if (options.frozen_weights->size() != n) {
      throw std::invalid_argument("objective: frozen weights need one entry per image");
    }
    out.weights = *options.frozen_weights;
  } else if (flags.quantify) {
    Tensor lv = neck(gem_pool(localized.detach(), options.gem_p), modules.neck, branch_mode(n));
    Tensor probs = softmax(linear(lv, modules.head.weight.detach()), 1);
    const std::size_t k = probs.size(1);
    out.weights.assign(n, 0.0);
    for (const auto& grp : groups) {
      std::vector<double> p;
      for (auto i : grp) p.push_back(probs[i * k + static_cast<std::size_t>(labels[i])]);
      auto w = quantification_weights(p);
      for (std::size_t m = 0; m < grp.size(); ++m) out.weights[grp[m]] = w[m];
    }
  } else {
    out.weights.assign(n, 0.0);
    for (const auto& grp : groups)
      for (auto i : grp) out.weights[i] = 1.0 / static_cast<double>(grp.size());
  }

  Tensor integrated = group_sum(scale_rows(localized, out.weights), groups);
  Tensor integrated_vectors =
      neck(gem_pool(integrated, options.gem_p), modules.neck, branch_mode(groups.size()));
  std::vector<int> group_labels;
  for (const auto& grp : groups) group_labels.push_back(labels[grp.front()]);
  out.l_id2 = smoothed_cross_entropy(linear(integrated_vectors, modules.head2.weight), group_labels,
                                     options.epsilon);
  out.teacher = integrated_vectors.detach();

  Tensor teacher = options.detach_teacher ? out.teacher : integrated_vectors;
  if (options.frozen_teacher) {
    if (options.frozen_teacher->shape() != integrated_vectors.shape()) {
      throw std::invalid_argument("objective: frozen teacher has the wrong shape");
    }
    teacher = *options.frozen_teacher;
  }
  Tensor distances = row_l2_distance(index_select(teacher, group_of), features);
  out.l_kd = scale(sum(distances), 1.0 / static_cast<double>(groups.size()));
  out.total = total_objective(out.l_id, out.l_id2, out.l_kd, options.lambda);
  out.breakdown = total_loss(out.l_id.item(), out.l_id2.item(), out.l_kd.item(), options.lambda);
  return out;
}

}  // namespace mvi2p
