#pragma once

#include "etad/detector.hpp"
#include "etad/encoder.hpp"
#include "etad/samplers.hpp"
#include "etad/synthdata.hpp"
#include "etad/tadeval.hpp"
#include "etad/tensor.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace etad {

// ledger/accountant phase labels used by the trainer
inline constexpr const char* kPhaseEncoderForward = "encoder_forward";
inline constexpr const char* kPhaseDetector = "detector";
inline constexpr const char* kPhaseEncoderUpdate = "encoder_update";
inline constexpr const char* kPhaseInfer = "infer";

struct SgsConfig {
  int micro_batch = 4;  // K
  double gamma = 0.30;
  SamplerKind snippet_sampler = SamplerKind::kRandom;
  double lr_detector = 1e-3;
  double lr_encoder = 1e-6;
  double weight_decay = 1e-4;
  int epochs = 6;
  int lr_decay_after = 5;
  double lr_decay = 0.1;
  int batch_videos = 4;
  bool rescale_sampled_grads = false;  // divide sampled rows by gamma
  std::vector<std::string> freeze_params;  // name prefixes excluded from updates
};

struct ApsConfig {
  double ratio = 0.06;
  SamplerKind strategy = SamplerKind::kRandom;
};

struct InferConfig {
  bool use_enumeration = false;  // full T(T-1)/2 candidates instead of peaks
  double aps_ratio = 1.0;        // grid proposal sampling at inference
  SoftNmsConfig nms;
};

struct RunConfig {
  DatasetConfig dataset;
  EncoderConfig encoder;
  DetectorConfig detector;
  SgsConfig sgs;
  ApsConfig aps;
  InferConfig infer;
  double train_eval_aps_ratio = 0.1;  // inference APS during per-epoch eval
  bool train_eval_use_enumeration = true;  // dense-map scoring for stability
  std::vector<double> eval_thresholds = default_map_thresholds();
  std::string dataset_dir = "data/default";
  std::string out_dir = "runs/default";
  std::uint64_t seed = 1;
  bool naive_e2e = false;
};

// AdamW with decoupled weight decay and per-group learning rates. step()
// zeroes the gradients it consumed.
class AdamW {
 public:
  struct Group {
    std::vector<std::pair<std::string, Tensor>> params;
    double lr = 1e-3;
  };

  AdamW(std::vector<Group> groups, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(std::size_t group, double lr);
  double lr(std::size_t group) const { return groups_[group].lr; }
  std::int64_t step_count() const { return step_; }

  // state access for checkpointing
  struct ParamState {
    ArrayX m;
    ArrayX v;
  };
  const std::map<std::string, ParamState>& state() const { return state_; }
  void restore(std::int64_t step, std::map<std::string, ParamState> state);

 private:
  std::vector<Group> groups_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::map<std::string, ParamState> state_;
};

// ---- SGS stages ----

// Stage 1: eval-mode encoding of all snippets in micro-batches of K; the
// result is a detached requires-grad leaf, ready to act as the detector
// input.
Tensor stage1_sequential_encode(Graph& graph, const EncoderModel& encoder,
                                const VideoSample& video, int micro_batch);

// parallel eval-mode encode of the whole video (reference path for tests)
Tensor parallel_encode(Graph& graph, const EncoderModel& encoder,
                       const VideoSample& video, bool requires_grad = true);

struct Stage2Result {
  LossBreakdown loss;
  MatrixR feature_grads;             // dL/dF, N x C, detached
  std::vector<std::size_t> aps_indices;
  DetectorOutputs outputs;           // values only; tape is freed
};

// Stage 2: detector forward on APS-sampled proposals, loss, backward through
// the detector only. Detector parameter gradients stay accumulated; the tape
// is freed.
Stage2Result stage2_detector_step(Graph& graph, const DetectorModel& detector,
                                  const Tensor& features,
                                  const std::vector<Segment>& gt,
                                  const ApsConfig& aps, RngStream& aps_rng);

// Stage 3: re-forward sampled snippets through the encoder in micro-batches
// and backpropagate the corresponding feature-gradient rows; encoder
// parameter gradients accumulate across micro-batches.
void stage3_sampled_update(Graph& graph, const EncoderModel& encoder,
                           const VideoSample& video,
                           const MatrixR& feature_grads, const SgsConfig& sgs,
                           RngStream& sgs_rng);

struct NaiveResult {
  LossBreakdown loss;
  std::vector<std::size_t> aps_indices;
};

// parallel end-to-end baseline: one train-mode forward of encoder+detector,
// one backward; the equivalence and memory-ratio oracle
NaiveResult naive_e2e_step(Graph& graph, const EncoderModel& encoder,
                           const DetectorModel& detector,
                           const VideoSample& video,
                           const std::vector<Segment>& gt,
                           const ApsConfig& aps, RngStream& aps_rng);

// ---- inference ----

std::vector<Detection> infer(Graph& graph, const EncoderModel& encoder,
                             const DetectorModel& detector,
                             const VideoSample& video, const InferConfig& cfg,
                             int micro_batch);

// ---- training ----

struct EpochMetrics {
  int epoch = 0;
  LossBreakdown mean_loss;
  double avg_map = 0.0;
  std::vector<double> per_threshold_ap;
  std::size_t peak_bytes_encoder_forward = 0;
  std::size_t peak_bytes_detector = 0;
  std::size_t peak_bytes_encoder_update = 0;
  std::uint64_t forward_flops_encoder = 0;
  std::uint64_t backward_flops_encoder = 0;
  std::uint64_t forward_flops_detector = 0;
  std::uint64_t backward_flops_detector = 0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double final_avg_map = 0.0;
};

class Trainer {
 public:
  Trainer(const RunConfig& config, const Dataset& dataset);

  TrainResult run();
  EvalResult evaluate(const std::vector<VideoSample>& videos,
                      const InferConfig& cfg);

  Graph& graph() { return graph_; }
  const EncoderModel& encoder() const { return encoder_; }
  const DetectorModel& detector() const { return detector_; }
  AdamW& optimizer() { return *optimizer_; }
  const RunConfig& config() const { return config_; }

 private:
  void train_one_video(int epoch, int video_index, const VideoSample& video,
                       LossBreakdown& accum);

  RunConfig config_;
  const Dataset& dataset_;
  Graph graph_;
  EncoderModel encoder_;
  DetectorModel detector_;
  std::unique_ptr<AdamW> optimizer_;
};

}  // namespace etad
