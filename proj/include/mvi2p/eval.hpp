#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mvi2p/tensor.hpp"

namespace mvi2p {

/// Frozen gallery of neck-stage descriptors.
struct RetrievalIndex {
  std::vector<std::vector<double>> features;  // [G][C]
  std::vector<int> pids;
  std::vector<int> camids;

  void validate() const;
  std::size_t size() const { return features.size(); }
};

/// dot(a,b) / (|a||b|); 0 when either vector is zero.
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct RankedList {
  std::vector<std::size_t> order;  // gallery indices, best first
  std::vector<bool> relevant;      // pid match, aligned with `order`
};

/// Ranks the gallery for one query after dropping same-pid same-camera
/// entries. Ties keep ascending gallery index.
RankedList rank_gallery(std::span<const double> query, int pid, int camid,
                        const RetrievalIndex& index);

struct CmcCurve {
  std::vector<double> values;  // values[k]: hit within top k+1
};

/// Lists with no relevant item are skipped; throws when none remain.
CmcCurve cmc(const std::vector<RankedList>& lists, std::size_t max_rank = 10);

/// Average precision at the relevant positions of one list.
double average_precision(const RankedList& list);

struct MapResult {
  double map = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;
};

MapResult mean_ap(const std::vector<RankedList>& lists);

struct RetrievalMetrics {
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;  // percentages
  double map = 0.0;                               // percentage
  CmcCurve curve;
  std::size_t evaluated_queries = 0;
  std::size_t excluded_queries = 0;
};

/// Full single-query protocol over query descriptors [Q][C].
RetrievalMetrics evaluate_retrieval(const std::vector<std::vector<double>>& query_features,
                                    std::span<const int> query_pids,
                                    std::span<const int> query_camids, const RetrievalIndex& index,
                                    std::size_t max_rank = 10);

}  // namespace mvi2p
