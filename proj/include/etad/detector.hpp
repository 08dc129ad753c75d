#pragma once

#include "etad/tadeval.hpp"
#include "etad/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace etad {

struct DetectorConfig {
  std::int64_t feature_dim = 64;       // C, encoder output width
  std::int64_t sequence_length = 128;  // N after resizing
  int group_norm_groups = 16;
  std::int64_t boundary_hidden = 32;
  std::vector<std::int64_t> pem_fc_dims = {64, 32, 32, 32};
  std::vector<double> stage_iou_thresholds = {0.7, 0.8, 0.9};
  double roi_extension = 0.25;   // extended region is [s-0.25d, e+0.25d]
  double roi_boundary = 0.15;    // boundary regions are +-0.15d around s/e
  int roi_extended_bins = 32;
  int roi_boundary_bins = 8;
  double iou_pos_threshold = 0.9;  // iou-classification binarization
  double iou_neg_threshold = 0.3;  // values in between are ignored
  double boundary_label_halfwidth = 1.5;  // snippet units
  double loss_lambda = 10.0;
  std::string enhance_cell = "mgu";  // minimal gated recurrent cell

  int stages() const { return static_cast<int>(stage_iou_thresholds.size()); }
};

struct GruCell {
  Tensor wz, uz, bz;  // update gate
  Tensor wh, uh, bh;  // candidate state
};

struct MlpHead {
  std::vector<Tensor> w;
  std::vector<Tensor> b;
};

struct PemStage {
  MlpHead offset;        // boundary feats -> start/end offset (1 out)
  MlpHead boundary_cls;  // boundary feats -> startness/endness logit (1 out)
  MlpHead center_width;  // extended feats -> (dc, dlogw)
  MlpHead iou;           // extended feats -> (iou_cls, iou_reg), sigmoid
};

struct DetectorModel {
  DetectorConfig config;
  GruCell gru_fwd, gru_bwd;
  Tensor enh_conv1_w, enh_conv1_b, enh_gn1_gamma, enh_gn1_beta;
  Tensor enh_conv2_w, enh_conv2_b, enh_gn2_gamma, enh_gn2_beta;
  Tensor bd_conv_w, bd_conv_b;            // shared trunk conv
  Tensor bd_start_w, bd_start_b;          // 1-channel start conv
  Tensor bd_end_w, bd_end_b;              // 1-channel end conv
  std::vector<PemStage> stages;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::int64_t parameter_count() const;
};

DetectorModel init_detector(Graph& graph, const DetectorConfig& config,
                            std::uint64_t seed);

// residual bidirectional recurrent enhancement followed by two conv +
// group-norm + relu blocks; (N,C) -> (N,C)
Tensor enhance(const DetectorModel& model, const Tensor& features);

// per-snippet startness/endness probabilities, each (N,1)
std::pair<Tensor, Tensor> boundary_head(const DetectorModel& model,
                                        const Tensor& enhanced);

// Sampled bins per proposal, flattened bin-major: row p holds the bins of
// proposal p as [f(pos_0); f(pos_1); ...], each of C channels. Sample
// positions clamp to the sequence edge.
struct ProposalFeatures {
  Tensor start;     // (P, Bb*C)
  Tensor end;       // (P, Bb*C)
  Tensor extended;  // (P, Be*C)
};

ProposalFeatures roi_align(const DetectorConfig& config, const Tensor& enhanced,
                           const ProposalSet& proposals);

struct PemOutput {
  Tensor offset_start;    // (P,1)
  Tensor offset_end;      // (P,1)
  Tensor prop_startness;  // (P,1), sigmoid
  Tensor prop_endness;    // (P,1), sigmoid
  Tensor center_width;    // (P,2): (dc, dlogw)
  Tensor iou;             // (P,2): (iou_cls, iou_reg), sigmoid
};

PemOutput pem_forward(const DetectorModel& model, int stage,
                      const ProposalFeatures& feats);

// Boundary-path and center-path refinement averaged per proposal, clipped to
// [0, N]; inverted boundaries are swapped and zero-width results padded to a
// minimal width.
ProposalSet refine(const ProposalSet& proposals, const PemOutput& out,
                   double sequence_length);

struct StageLabels {
  std::vector<double> prop_start;  // proposal startness targets, 0/1
  std::vector<double> prop_end;
  std::vector<double> iou_target;  // max tIoU against ground truth
  std::vector<int> matched_gt;     // argmax gt index, -1 if none
  std::vector<char> positive;      // iou_target >= stage threshold
};

struct SnippetLabels {
  std::vector<double> start;  // length N, 0/1
  std::vector<double> end;
};

SnippetLabels assign_snippet_labels(const std::vector<Segment>& gt,
                                    std::int64_t n, double halfwidth);
StageLabels assign_labels(const DetectorConfig& config,
                          const std::vector<Segment>& gt,
                          const ProposalSet& proposals, int stage);

struct StageOutput {
  ProposalSet proposals;  // the set this stage evaluated
  PemOutput pem;
};

struct DetectorOutputs {
  Tensor start_prob;  // (N,1)
  Tensor end_prob;    // (N,1)
  std::vector<StageOutput> stages;
  ProposalSet final_proposals;  // refinement of the last stage
};

// time-interpolates (N',C) features to the configured sequence length;
// identity when the lengths already match
Tensor maybe_resize_features(const DetectorConfig& config,
                             const Tensor& features);

// cascade over precomputed enhanced features and boundary probabilities
DetectorOutputs detector_cascade(const DetectorModel& model,
                                 const Tensor& enhanced, Tensor start_prob,
                                 Tensor end_prob, const ProposalSet& proposals);

// full forward pass over an already-sampled proposal set
DetectorOutputs detector_forward(const DetectorModel& model,
                                 const Tensor& features,
                                 const ProposalSet& proposals);

// Cascade with the per-stage proposal sets pinned in advance instead of
// derived by refinement. The refinement path is detached from the tape, so
// the executed computation differentiated by backward() is exactly this
// fixed-set function; finite-difference oracles evaluate it.
DetectorOutputs detector_forward_fixed(
    const DetectorModel& model, const Tensor& features,
    const std::vector<ProposalSet>& stage_sets);

struct LossBreakdown {
  double l_bd_s = 0.0;
  std::vector<double> l_bd_p;
  std::vector<double> l_iou;
  std::vector<double> l_secw;
  double lambda = 10.0;
  double total = 0.0;
};

// balanced binary cross entropy: with P positives and Q negatives the
// positive side is weighted 1/(2P) and the negative side 1/(2Q); a missing
// side contributes 0
Tensor balanced_bce(Graph& graph, const Tensor& prob,
                    const std::vector<double>& labels,
                    const std::vector<char>* valid = nullptr);

std::pair<Tensor, LossBreakdown> compute_loss(const DetectorModel& model,
                                              const DetectorOutputs& outputs,
                                              const std::vector<Segment>& gt);

}  // namespace etad
