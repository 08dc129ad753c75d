#include "etad/tadeval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace etad {

double tiou(const Segment& a, const Segment& b) {
  const double inter =
      std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0.0) return 0.0;
  const double uni = a.length() + b.length() - inter;
  return inter / uni;
}

ProposalSet enumerate_proposals(int t) {
  if (t < 2)
    throw std::invalid_argument("enumerate_proposals: need at least 2 "
                                "snippets, got " +
                                std::to_string(t));
  ProposalSet out;
  out.reserve(static_cast<std::size_t>(t) * (t - 1) / 2);
  for (int s = 0; s < t - 1; ++s)
    for (int e = s + 1; e <= t - 1; ++e)
      out.push_back(Proposal{double(s), double(e), s, e});
  return out;
}

namespace {

std::vector<int> boundary_candidates(const std::vector<double>& prob) {
  const int n = static_cast<int>(prob.size());
  if (n == 0) return {};
  const double bar = 0.5 * *std::max_element(prob.begin(), prob.end());
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    const bool left_ok = i == 0 || prob[i] > prob[i - 1];
    const bool right_ok = i == n - 1 || prob[i] > prob[i + 1];
    if ((left_ok && right_ok) || prob[i] > bar) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<std::pair<int, int>> select_boundaries(
    const std::vector<double>& start_prob,
    const std::vector<double>& end_prob) {
  std::vector<int> starts = boundary_candidates(start_prob);
  std::vector<int> ends = boundary_candidates(end_prob);
  std::vector<std::pair<int, int>> out;
  for (int s : starts)
    for (int e : ends)
      if (s < e) out.emplace_back(s, e);
  return out;
}

double fuse_scores(double p_start, double p_end, double p_iou) {
  return p_start * p_end * p_iou;
}

std::vector<Detection> soft_nms(std::vector<Detection> detections,
                                const SoftNmsConfig& config) {
  struct Entry {
    Detection det;
    double score;
    std::size_t index;
  };
  std::vector<Entry> pool;
  pool.reserve(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i)
    pool.push_back({detections[i], detections[i].score, i});

  std::vector<Detection> kept;
  while (!pool.empty() && kept.size() < config.top_k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      const Entry& a = pool[i];
      const Entry& b = pool[best];
      if (a.score > b.score ||
          (a.score == b.score &&
           (a.det.start < b.det.start ||
            (a.det.start == b.det.start && a.index < b.index))))
        best = i;
    }
    Entry top = pool[best];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(best));
    top.det.score = top.score;
    kept.push_back(top.det);

    std::vector<Entry> next;
    next.reserve(pool.size());
    for (Entry& e : pool) {
      const double overlap = tiou(Segment{e.det.start, e.det.end},
                                  Segment{top.det.start, top.det.end});
      e.score *= std::exp(-(overlap * overlap) / config.sigma);
      if (e.score >= config.score_floor) next.push_back(e);
    }
    pool = std::move(next);
  }
  return kept;
}

EvalResult compute_map(
    const std::vector<Detection>& detections,
    const std::map<std::string, std::vector<Segment>>& ground_truth,
    const std::vector<double>& thresholds) {
  std::size_t total_gt = 0;
  for (const auto& [_, segs] : ground_truth) total_gt += segs.size();
  if (total_gt == 0)
    throw std::invalid_argument(
        "compute_map: no ground-truth instances, AP undefined");

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Detection& da = detections[a];
    const Detection& db = detections[b];
    if (da.score != db.score) return da.score > db.score;
    if (da.start != db.start) return da.start < db.start;
    return a < b;
  });

  EvalResult result;
  result.thresholds = thresholds;
  for (double thr : thresholds) {
    std::map<std::string, std::vector<char>> matched;
    for (const auto& [vid, segs] : ground_truth)
      matched[vid] = std::vector<char>(segs.size(), 0);

    std::vector<double> precision, recall;
    std::size_t tp = 0;
    std::size_t seen = 0;
    for (std::size_t oi : order) {
      const Detection& d = detections[oi];
      ++seen;
      auto git = ground_truth.find(d.video_id);
      double best_iou = 0.0;
      std::ptrdiff_t best_gt = -1;
      if (git != ground_truth.end()) {
        auto& flags = matched[d.video_id];
        for (std::size_t gi = 0; gi < git->second.size(); ++gi) {
          if (flags[gi]) continue;
          const double o = tiou(Segment{d.start, d.end}, git->second[gi]);
          if (o > best_iou) {
            best_iou = o;
            best_gt = static_cast<std::ptrdiff_t>(gi);
          }
        }
      }
      if (best_gt >= 0 && best_iou >= thr) {
        matched[d.video_id][static_cast<std::size_t>(best_gt)] = 1;
        ++tp;
      }
      precision.push_back(double(tp) / double(seen));
      recall.push_back(double(tp) / double(total_gt));
    }

    // all-point interpolation: precision envelope from the right
    double ap = 0.0;
    double env = 0.0;
    for (std::size_t i = precision.size(); i-- > 0;) {
      env = std::max(env, precision[i]);
      const double r_prev = i == 0 ? 0.0 : recall[i - 1];
      if (recall[i] > r_prev) ap += (recall[i] - r_prev) * env;
    }
    result.ap.push_back(ap);
  }
  result.average_map =
      std::accumulate(result.ap.begin(), result.ap.end(), 0.0) /
      double(result.ap.size());
  return result;
}

std::vector<double> default_map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

}  // namespace etad
