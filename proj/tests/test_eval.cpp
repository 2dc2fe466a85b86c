#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mvi2p/eval.hpp"
#include "mvi2p/rng.hpp"
#include "support/oracles.hpp"

using namespace mvi2p;

namespace {

RankedList list_of(std::vector<bool> relevant) {
  RankedList l;
  l.relevant = std::move(relevant);
  l.order.resize(l.relevant.size());
  std::iota(l.order.begin(), l.order.end(), 0);
  return l;
}

}  // namespace

TEST_CASE("cosine similarity examples and properties") {
  using V = std::vector<double>;
  CHECK(cosine_sim(V{1, 0}, V{1, 0}) == 1.0);
  CHECK(cosine_sim(V{1, 0}, V{0, 1}) == 0.0);
  CHECK(std::abs(cosine_sim(V{1, 1}, V{1, 0}) - 0.7071) <= 1e-4);
  CHECK(std::abs(cosine_sim(V{1, 1}, V{1, 0}) - std::sqrt(0.5)) <= 1e-6);
  CHECK(cosine_sim(V{0, 0}, V{1, 0}) == 0.0);
  CHECK_THROWS(cosine_sim(V{1}, V{1, 0}));
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    V a(5), b(5);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    CHECK(cosine_sim(a, b) == cosine_sim(b, a));
    V sa = a;
    const double alpha = rng.uniform(0.01, 100.0);
    for (auto& x : sa) x *= alpha;
    CHECK(std::abs(cosine_sim(sa, b) - cosine_sim(a, b)) <= 1e-12);
    const double s = cosine_sim(a, b);
    CHECK((s >= -1.0 && s <= 1.0));
  }
}

TEST_CASE("ranking filters same-camera matches and breaks ties by index") {
  RetrievalIndex idx;
  // sims to query (1,0): 0.9, 0.8, 0.8
  const double s9 = std::sqrt(1 - 0.81), s8 = std::sqrt(1 - 0.64);
  idx.features = {{0.9, s9}, {0.8, s8}, {0.8, s8}};
  idx.pids = {7, 1, 1};
  idx.camids = {0, 1, 2};
  auto r = rank_gallery(std::vector<double>{1.0, 0.0}, 1, 0, idx);
  CHECK(r.order == std::vector<std::size_t>{0, 1, 2});
  CHECK(r.relevant == std::vector<bool>{false, true, true});

  auto filtered = rank_gallery(std::vector<double>{1.0, 0.0}, 1, 1, idx);
  CHECK(filtered.order == std::vector<std::size_t>{0, 2});

  RetrievalIndex one;
  one.features = {{1.0}};
  one.pids = {3};
  one.camids = {1};
  auto single = rank_gallery(std::vector<double>{2.0}, 3, 0, one);
  CHECK(single.order.size() == 1);
  CHECK(single.relevant[0]);
  auto none = rank_gallery(std::vector<double>{2.0}, 3, 1, one);
  CHECK(none.order.empty());
}

TEST_CASE("CMC and AP examples") {
  auto all_top = cmc({list_of({true, false}), list_of({true})}, 10);
  for (double v : all_top.values) CHECK(v == 1.0);
  auto third = cmc({list_of({false, false, true, false})}, 5);
  CHECK(third.values == std::vector<double>{0, 0, 1, 1, 1});
  CHECK(std::abs(average_precision(list_of({true, false, true, false})) - 0.8333333333) <= 1e-9);
  CHECK(std::abs(average_precision(list_of({true, false, true, false})) - (1.0 + 2.0 / 3.0) / 2.0) <= 1e-15);
  CHECK(average_precision(list_of({true, true, false})) == 1.0);
  CHECK_THROWS(cmc({list_of({false})}, 10));
  auto m = mean_ap({list_of({false}), list_of({false, true})});
  CHECK(m.excluded == 1);
  CHECK(m.evaluated == 1);
  CHECK(m.map == 0.5);
}

TEST_CASE("library metrics equal brute-force oracles on 200 random instances") {
  Rng rng(2024);
  int compared = 0;
  for (int t = 0; t < 200; ++t) {
    auto inst = oracles::random_instance(rng);
    auto lists = oracles::library_lists(inst);
    for (std::size_t q = 0; q < inst.queries.size(); ++q) {
      auto b = oracles::brute_rank(inst.queries[q], inst.query_pids[q], inst.query_camids[q], inst.gallery);
      CHECK(b.order == lists[q].order);
      CHECK(b.relevant == lists[q].relevant);
    }
    auto expect = oracles::brute_cmc(lists, 10);
    if (expect.empty()) {
      CHECK_THROWS(cmc(lists, 10));
      continue;
    }
    ++compared;
    CHECK(cmc(lists, 10).values == expect);
    double acc = 0.0;
    std::size_t n = 0, excluded = 0;
    for (const auto& l : lists) {
      const double ap = oracles::brute_ap(l);
      if (std::isnan(ap)) {
        ++excluded;
        continue;
      }
      CHECK(average_precision(l) == ap);
      acc += ap;
      ++n;
    }
    auto m = mean_ap(lists);
    CHECK(m.map == acc / double(n));
    CHECK(m.excluded == excluded);
  }
  CHECK(compared > 100);
}

TEST_CASE("gallery storage order does not change metrics") {
  Rng rng(77);
  for (int t = 0; t < 50; ++t) {
    const std::size_t g = 12, c = 4;
    RetrievalIndex idx;
    for (std::size_t i = 0; i < g; ++i) {
      std::vector<double> f(c);
      for (auto& x : f) x = rng.uniform(-1, 1);  // continuous values: no ties
      idx.features.push_back(f);
      idx.pids.push_back(rng.integer(0, 3));
      idx.camids.push_back(rng.integer(0, 1));
    }
    std::vector<std::vector<double>> qf;
    std::vector<int> qp, qc;
    for (int q = 0; q < 4; ++q) {
      std::vector<double> f(c);
      for (auto& x : f) x = rng.uniform(-1, 1);
      qf.push_back(f);
      qp.push_back(q);
      qc.push_back(rng.integer(0, 1));
    }
    std::vector<std::size_t> perm(g);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = g - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    RetrievalIndex shuffled;
    for (auto p : perm) {
      shuffled.features.push_back(idx.features[p]);
      shuffled.pids.push_back(idx.pids[p]);
      shuffled.camids.push_back(idx.camids[p]);
    }
    bool ok = true;
    RetrievalMetrics a, b;
    try {
      a = evaluate_retrieval(qf, qp, qc, idx);
      b = evaluate_retrieval(qf, qp, qc, shuffled);
    } catch (const std::invalid_argument&) {
      ok = false;  // no evaluable query in this draw
    }
    if (!ok) continue;
    CHECK(a.rank1 == b.rank1);
    CHECK(a.rank5 == b.rank5);
    CHECK(a.map == doctest::Approx(b.map).epsilon(1e-12));
    CHECK(a.excluded_queries == b.excluded_queries);
  }
}

TEST_CASE("reports are percentages with ordered ranks") {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    auto inst = oracles::random_instance(rng);
    RetrievalMetrics m;
    try {
      m = evaluate_retrieval(inst.queries, inst.query_pids, inst.query_camids, inst.gallery);
    } catch (const std::invalid_argument&) {
      continue;
    }
    CHECK(m.rank1 <= m.rank5);
    CHECK(m.rank5 <= m.rank10);
    CHECK((m.map >= 0.0 && m.map <= 100.0));
    CHECK(std::is_sorted(m.curve.values.begin(), m.curve.values.end()));
    CHECK(m.evaluated_queries + m.excluded_queries == inst.queries.size());
  }
}

TEST_CASE("index validation") {
  RetrievalIndex idx;
  CHECK_THROWS(idx.validate());
  idx.features = {{1.0, NAN}};
  idx.pids = {0};
  idx.camids = {0};
  CHECK_THROWS(idx.validate());
  idx.features = {{1.0, 2.0}, {1.0}};
  idx.pids = {0, 1};
  idx.camids = {0, 0};
  CHECK_THROWS(idx.validate());
}
