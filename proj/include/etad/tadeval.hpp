#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace etad {

// all coordinates are continuous snippet units
struct Segment {
  double start = 0.0;
  double end = 0.0;
  double length() const { return end - start; }
};

double tiou(const Segment& a, const Segment& b);

struct Proposal {
  double start = 0.0;
  double end = 0.0;
  int start_index = -1;  // lattice indices when born from enumeration
  int end_index = -1;
  double duration() const { return end - start; }
  Segment segment() const { return {start, end}; }
};

using ProposalSet = std::vector<Proposal>;

// all (s, e) snippet-index pairs with 0 <= s < e <= t-1, s-major order;
// |set| = t*(t-1)/2
ProposalSet enumerate_proposals(int t);

// Candidate starts: strict local maxima of start_prob (single-neighbor rule
// at the endpoints) or values above 0.5 * max(start_prob); same for ends.
// Returns all (s, e) index pairs with s < e.
std::vector<std::pair<int, int>> select_boundaries(
    const std::vector<double>& start_prob, const std::vector<double>& end_prob);

struct Detection {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
  double score = 0.0;
  double p_start = 0.0;
  double p_end = 0.0;
  double p_iou = 0.0;
};

double fuse_scores(double p_start, double p_end, double p_iou);

struct SoftNmsConfig {
  double sigma = 0.4;
  double score_floor = 1e-4;
  std::size_t top_k = 100;
};

// Gaussian-decay soft-NMS: repeatedly keep the best-scored detection and
// decay the rest by exp(-tiou^2 / sigma). Ties break on (score, earlier
// start, lower input index).
std::vector<Detection> soft_nms(std::vector<Detection> detections,
                                const SoftNmsConfig& config);

struct EvalResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // one per threshold
  double average_map = 0.0;
};

// Class-agnostic detection mAP. Detections are pooled over videos and
// matched greedily (descending score) against unmatched ground truth of the
// same video; AP uses the all-point precision envelope.
EvalResult compute_map(
    const std::vector<Detection>& detections,
    const std::map<std::string, std::vector<Segment>>& ground_truth,
    const std::vector<double>& thresholds);

std::vector<double> default_map_thresholds();  // 0.5 : 0.05 : 0.95

}  // namespace etad
