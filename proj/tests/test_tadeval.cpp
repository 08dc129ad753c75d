#include <doctest.h>

#include "etad/rng.hpp"
#include "etad/tadeval.hpp"

#include <algorithm>
#include <cmath>

using namespace etad;

namespace {

// literal restatement of the soft-NMS procedure for small instances
std::vector<Detection> soft_nms_reference(std::vector<Detection> dets,
                                          const SoftNmsConfig& cfg) {
  std::vector<double> scores;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    scores.push_back(dets[i].score);
    order.push_back(i);
  }
  std::vector<char> alive(dets.size(), 1);
  std::vector<Detection> out;
  while (out.size() < cfg.top_k) {
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0) {
        best = std::ptrdiff_t(i);
        continue;
      }
      const auto b = static_cast<std::size_t>(best);
      if (scores[i] > scores[b] ||
          (scores[i] == scores[b] && dets[i].start < dets[b].start))
        best = std::ptrdiff_t(i);
    }
    if (best < 0) break;
    const auto bi = static_cast<std::size_t>(best);
    alive[bi] = 0;
    Detection d = dets[bi];
    d.score = scores[bi];
    out.push_back(d);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i]) continue;
      const double o =
          tiou({dets[i].start, dets[i].end}, {d.start, d.end});
      scores[i] *= std::exp(-(o * o) / cfg.sigma);
      if (scores[i] < cfg.score_floor) alive[i] = 0;
    }
  }
  return out;
}

Detection make_det(double s, double e, double score,
                   const std::string& vid = "v") {
  Detection d;
  d.video_id = vid;
  d.start = s;
  d.end = e;
  d.score = score;
  return d;
}

}  // namespace

TEST_SUITE_BEGIN("tadeval");

TEST_CASE("tiou basics and symmetry") {
  CHECK(tiou({3, 7}, {3, 7}) == 1.0);
  CHECK(tiou({0, 1}, {2, 3}) == 0.0);
  CHECK(tiou({0, 2}, {1, 3}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(tiou({10, 20}, {12, 22}) == doctest::Approx(8.0 / 12.0).epsilon(1e-15));

  RngStream rng(5, "tiou");
  for (int i = 0; i < 200; ++i) {
    const double a0 = rng.uniform(0, 10), a1 = a0 + rng.uniform(0.01, 5);
    const double b0 = rng.uniform(0, 10), b1 = b0 + rng.uniform(0.01, 5);
    const double ab = tiou({a0, a1}, {b0, b1});
    CHECK(ab == tiou({b0, b1}, {a0, a1}));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    if (ab == 1.0) {
      CHECK(a0 == b0);
      CHECK(a1 == b1);
    }
  }
}

TEST_CASE("enumerate_proposals counts and order") {
  CHECK_THROWS_AS(enumerate_proposals(1), std::invalid_argument);

  ProposalSet two = enumerate_proposals(2);
  REQUIRE(two.size() == 1);
  CHECK(two[0].start_index == 0);
  CHECK(two[0].end_index == 1);

  CHECK(enumerate_proposals(128).size() == 8128);

  for (int t = 2; t <= 256; t += 13)
    CHECK(enumerate_proposals(t).size() ==
          static_cast<std::size_t>(t) * (t - 1) / 2);

  // 6% of the T=8 map rounds to 2 proposals
  ProposalSet eight = enumerate_proposals(8);
  CHECK(eight.size() == 28);
  CHECK(static_cast<std::size_t>(std::floor(0.06 * 28 + 0.5)) == 2);
}

TEST_CASE("select_boundaries: peaks, 0.5*max rule, uniform case") {
  // single peaks
  std::vector<double> sp = {0.1, 0.2, 0.1, 0.05, 0.05, 0.9, 0.2, 0.1, 0.1, 0.1};
  std::vector<double> ep = {0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.8};
  auto cands = select_boundaries(sp, ep);
  bool found = false;
  for (auto [s, e] : cands) found |= (s == 5 && e == 9);
  CHECK(found);

  // geometric growth: only the peak index passes 0.5*max (0.32 is not
  // strictly above 0.5*0.64) and it is also the local maximum
  std::vector<double> rising = {0.04, 0.08, 0.16, 0.32, 0.64,
                                0.01, 0.01, 0.01, 0.01, 0.01};
  std::vector<double> end_peak = {0.01, 0.01, 0.01, 0.01, 0.01,
                                  0.01, 0.01, 0.01, 0.01, 0.9};
  auto rc = select_boundaries(rising, end_peak);
  REQUIRE(rc.size() == 1);
  CHECK(rc[0].first == 4);
  CHECK(rc[0].second == 9);

  // uniform probabilities: everything passes the 0.5*max rule
  std::vector<double> uni(16, 0.5);
  auto all = select_boundaries(uni, uni);
  CHECK(all.size() == 16 * 15 / 2);
}

TEST_CASE("fuse_scores is the plain product") {
  CHECK(fuse_scores(1, 1, 1) == 1.0);
  CHECK(fuse_scores(0, 0.7, 0.9) == 0.0);
  CHECK(fuse_scores(0.5, 0.5, 0.5) == 0.125);
}

TEST_CASE("soft_nms: disjoint survive, identical decay by the formula") {
  SoftNmsConfig cfg;
  cfg.sigma = 0.4;
  std::vector<Detection> disjoint = {make_det(0, 1, 0.9),
                                     make_det(5, 6, 0.8)};
  auto kept = soft_nms(disjoint, cfg);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].score == 0.8);

  std::vector<Detection> same = {make_det(2, 4, 0.9), make_det(2, 4, 0.8)};
  kept = soft_nms(same, cfg);
  REQUIRE(kept.size() == 2);
  CHECK(kept[1].score ==
        doctest::Approx(0.8 * std::exp(-1.0 / 0.4)).epsilon(1e-12));
}

TEST_CASE("soft_nms matches the reference on random small instances") {
  RngStream rng(11, "nms");
  SoftNmsConfig cfg;
  cfg.sigma = 0.3;
  cfg.score_floor = 1e-3;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = 1 + int(rng.uniform_int(5));
    for (int i = 0; i < n; ++i) {
      const double s = rng.uniform(0, 20);
      dets.push_back(make_det(s, s + rng.uniform(0.5, 8), rng.uniform()));
    }
    auto got = soft_nms(dets, cfg);
    auto expect = soft_nms_reference(dets, cfg);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].start == expect[i].start);
      CHECK(std::abs(got[i].score - expect[i].score) <= 1e-12);
    }
  }
}

TEST_CASE("soft_nms with tiny sigma degenerates to hard NMS") {
  SoftNmsConfig cfg;
  cfg.sigma = 1e-12;
  std::vector<Detection> dets = {make_det(0, 4, 0.9), make_det(1, 5, 0.8),
                                 make_det(10, 14, 0.7)};
  auto kept = soft_nms(dets, cfg);
  REQUIRE(kept.size() == 2);  // the overlapping one is killed
  CHECK(kept[0].start == 0);
  CHECK(kept[1].start == 10);
}

TEST_CASE("compute_map: perfect, empty, and a hand-computed PR table") {
  std::map<std::string, std::vector<Segment>> gt;
  gt["v"] = {{0, 10}, {20, 30}};
  std::vector<double> thresholds = default_map_thresholds();
  REQUIRE(thresholds.size() == 10);
  CHECK(thresholds.front() == doctest::Approx(0.5));
  CHECK(thresholds.back() == doctest::Approx(0.95));

  std::vector<Detection> perfect = {make_det(0, 10, 1.0),
                                    make_det(20, 30, 1.0)};
  EvalResult r = compute_map(perfect, gt, thresholds);
  for (double ap : r.ap) CHECK(ap == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.average_map == doctest::Approx(1.0).epsilon(1e-12));

  EvalResult empty = compute_map({}, gt, thresholds);
  CHECK(empty.average_map == 0.0);

  CHECK_THROWS_AS(compute_map(perfect, {}, thresholds),
                  std::invalid_argument);

  // 3 detections, 2 gt, threshold 0.5:
  //   det A [0,10] s=0.9  -> TP (iou 1.0), precision 1/1, recall 1/2
  //   det B [0,10] s=0.8  -> FP (gt matched), precision 1/2
  //   det C [20,29] s=0.7 -> TP (iou 0.9),  precision 2/3, recall 1
  // all-point AP = 0.5*1 + 0.5*(2/3) = 5/6
  std::vector<Detection> mixed = {make_det(0, 10, 0.9), make_det(0, 10, 0.8),
                                  make_det(20, 29, 0.7)};
  EvalResult pr = compute_map(mixed, gt, {0.5});
  CHECK(pr.ap[0] == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("compute_map is stable under equal-score input order") {
  std::map<std::string, std::vector<Segment>> gt;
  gt["v"] = {{0, 10}, {12, 22}};
  std::vector<Detection> a = {make_det(0, 10, 0.5), make_det(12, 22, 0.5)};
  std::vector<Detection> b = {a[1], a[0]};
  EvalResult ra = compute_map(a, gt, {0.5});
  EvalResult rb = compute_map(b, gt, {0.5});
  CHECK(ra.ap[0] == rb.ap[0]);
}

TEST_SUITE_END();
