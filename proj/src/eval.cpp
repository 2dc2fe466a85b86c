#include "mvi2p/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mvi2p {

void RetrievalIndex::validate() const {
  if (features.empty()) throw std::invalid_argument("retrieval index: empty gallery");
  if (pids.size() != features.size() || camids.size() != features.size()) {
    throw std::invalid_argument("retrieval index: pids/camids do not match feature rows");
  }
  const std::size_t c = features.front().size();
  for (const auto& row : features) {
    if (row.size() != c) throw std::invalid_argument("retrieval index: ragged feature rows");
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("retrieval index: non-finite feature");
  }
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

RankedList rank_gallery(std::span<const double> query, int pid, int camid,
                        const RetrievalIndex& index) {
  if (index.size() == 0) throw std::invalid_argument("rank_gallery: empty gallery");
  std::vector<std::size_t> keep;
  std::vector<double> sims(index.size());
  for (std::size_t g = 0; g < index.size(); ++g) {
    if (index.pids[g] == pid && index.camids[g] == camid) continue;
    sims[g] = cosine_sim(query, index.features[g]);
    keep.push_back(g);
  }
  std::stable_sort(keep.begin(), keep.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  RankedList out;
  out.order = std::move(keep);
  out.relevant.reserve(out.order.size());
  for (auto g : out.order) out.relevant.push_back(index.pids[g] == pid);
  return out;
}

namespace {

bool evaluable(const RankedList& list) {
  return std::find(list.relevant.begin(), list.relevant.end(), true) != list.relevant.end();
}

}  // namespace

CmcCurve cmc(const std::vector<RankedList>& lists, std::size_t max_rank) {
  if (max_rank < 1) throw std::invalid_argument("cmc: max_rank must be >= 1");
  std::vector<std::size_t> hits(max_rank, 0);
  std::size_t count = 0;
  for (const auto& list : lists) {
    if (!evaluable(list)) continue;
    ++count;
    const auto first = static_cast<std::size_t>(
        std::find(list.relevant.begin(), list.relevant.end(), true) - list.relevant.begin());
    for (std::size_t k = first; k < max_rank; ++k) ++hits[k];
  }
  if (count == 0) throw std::invalid_argument("cmc: no evaluable queries");
  CmcCurve curve;
  for (auto h : hits) curve.values.push_back(static_cast<double>(h) / static_cast<double>(count));
  return curve;
}

double average_precision(const RankedList& list) {
  std::size_t found = 0;
  double acc = 0.0;
  for (std::size_t r = 0; r < list.relevant.size(); ++r) {
    if (!list.relevant[r]) continue;
    ++found;
    acc += static_cast<double>(found) / static_cast<double>(r + 1);
  }
  if (found == 0) throw std::invalid_argument("average_precision: no relevant items");
  return acc / static_cast<double>(found);
}

MapResult mean_ap(const std::vector<RankedList>& lists) {
  MapResult out;
  double acc = 0.0;
  for (const auto& list : lists) {
    if (!evaluable(list)) {
      ++out.excluded;
      continue;
    }
    acc += average_precision(list);
    ++out.evaluated;
  }
  if (out.evaluated == 0) throw std::invalid_argument("mean_ap: no evaluable queries");
  out.map = acc / static_cast<double>(out.evaluated);
  return out;
}

RetrievalMetrics evaluate_retrieval(const std::vector<std::vector<double>>& query_features,
                                    std::span<const int> query_pids,
                                    std::span<const int> query_camids, const RetrievalIndex& index,
                                    std::size_t max_rank) {
  index.validate();
  if (query_features.size() != query_pids.size() || query_features.size() != query_camids.size()) {
    throw std::invalid_argument("evaluate_retrieval: query metadata mismatch");
  }
  std::vector<RankedList> lists;
  lists.reserve(query_features.size());
  for (std::size_t q = 0; q < query_features.size(); ++q) {
    lists.push_back(rank_gallery(query_features[q], query_pids[q], query_camids[q], index));
  }
  RetrievalMetrics m;
  m.curve = cmc(lists, std::max<std::size_t>(max_rank, 10));
  const auto ap = mean_ap(lists);
  m.map = 100.0 * ap.map;
  m.evaluated_queries = ap.evaluated;
  m.excluded_queries = ap.excluded;
  m.rank1 = 100.0 * m.curve.values[0];
  m.rank5 = 100.0 * m.curve.values[4];
  m.rank10 = 100.0 * m.curve.values[9];
  m.curve.values.resize(max_rank);
  return m;
}

}  // namespace mvi2p
