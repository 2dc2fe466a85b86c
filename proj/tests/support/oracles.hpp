#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond plain data types.

#include <cstdint>
#include <vector>

#include "mvi2p/data.hpp"
#include "mvi2p/eval.hpp"
#include "mvi2p/rng.hpp"

namespace oracles {

/// Random retrieval problem: up to 5 queries against up to 20 gallery items.
struct RetrievalInstance {
  std::vector<std::vector<double>> queries;
  std::vector<int> query_pids, query_camids;
  mvi2p::RetrievalIndex gallery;
};
RetrievalInstance random_instance(mvi2p::Rng& rng);

/// Selection-scan ranking: repeatedly takes the highest remaining similarity,
/// lowest index first on equality, after the same-pid same-camera filter.
mvi2p::RankedList brute_rank(const std::vector<double>& query, int pid, int camid,
                             const mvi2p::RetrievalIndex& gallery);

/// Returns an empty curve when no list has a relevant item.
std::vector<double> brute_cmc(const std::vector<mvi2p::RankedList>& lists, std::size_t max_rank);
/// NaN for a list without relevant items.
double brute_ap(const mvi2p::RankedList& list);

/// Every query's list for an instance, ranked by the library.
std::vector<mvi2p::RankedList> library_lists(const RetrievalInstance& inst);

/// Outcome of the raw-pixel nearest-neighbour learnability probe.
struct PixelProbe {
  double holistic_accuracy = 0.0;  // held-out unoccluded renders
  double occluded_accuracy = 0.0;  // the same views with a forced occluder
  std::size_t references = 0, probes = 0;
};
/// References: `refs_per_id` unoccluded renders per identity over all
/// cameras. Probes: `probes_per_id` fresh view seeds per identity.
PixelProbe pixel_nn_probe(int num_ids, int num_cams, int refs_per_id, int probes_per_id,
                          std::uint64_t master_seed);

}  // namespace oracles
