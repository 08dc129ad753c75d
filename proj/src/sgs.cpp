#include "etad/sgs.hpp"

#include "etad/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace etad {

// ---- AdamW ----

AdamW::AdamW(std::vector<Group> groups, double weight_decay, double beta1,
             double beta2, double eps)
    : groups_(std::move(groups)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  for (const Group& g : groups_)
    for (const auto& [name, p] : g.params)
      state_.emplace(name, ParamState{ArrayX::Zero(p.size()),
                                      ArrayX::Zero(p.size())});
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, double(step_));
  const double bc2 = 1.0 - std::pow(beta2_, double(step_));
  for (Group& g : groups_) {
    for (auto& [name, p] : g.params) {
      ArrayX grad = p.has_grad() ? ArrayX(p.grad()) : ArrayX(ArrayX::Zero(p.size()));
      if (!grad.allFinite())
        throw std::runtime_error("optimizer_step: non-finite gradient in " +
                                 name);
      ParamState& st = state_.at(name);
      st.m = beta1_ * st.m + (1.0 - beta1_) * grad;
      st.v = beta2_ * st.v + (1.0 - beta2_) * grad * grad;
      ArrayX mhat = st.m / bc1;
      ArrayX vhat = st.v / bc2;
      p.values() *= (1.0 - g.lr * weight_decay_);  // decoupled decay
      p.values() -= g.lr * mhat / (vhat.sqrt() + eps_);
      p.zero_grad();
    }
  }
}

void AdamW::zero_grad() {
  for (Group& g : groups_)
    for (auto& [_, p] : g.params) p.zero_grad();
}

void AdamW::set_lr(std::size_t group, double lr) { groups_[group].lr = lr; }

void AdamW::restore(std::int64_t step, std::map<std::string, ParamState> state) {
  step_ = step;
  for (auto& [name, st] : state) {
    auto it = state_.find(name);
    if (it == state_.end())
      throw std::invalid_argument("optimizer restore: unknown parameter " +
                                  name);
    if (st.m.size() != it->second.m.size())
      throw std::invalid_argument("optimizer restore: size mismatch for " +
                                  name);
    it->second = std::move(st);
  }
}

// ---- stage helpers ----

namespace {

Tensor snippet_leaf(Graph& graph, const VideoSample& video, std::int64_t first,
                    std::int64_t count) {
  const std::int64_t row = video.frames * video.frame_dim;
  ArrayX vals = video.snippets.segment(first * row, count * row);
  return graph.leaf({count, video.frames, video.frame_dim}, std::move(vals));
}

Tensor gather_snippet_leaf(Graph& graph, const VideoSample& video,
                           const std::vector<std::size_t>& indices) {
  const std::int64_t row = video.frames * video.frame_dim;
  ArrayX vals(static_cast<std::int64_t>(indices.size()) * row);
  for (std::size_t i = 0; i < indices.size(); ++i)
    vals.segment(static_cast<std::int64_t>(i) * row, row) =
        video.snippets.segment(static_cast<std::int64_t>(indices[i]) * row, row);
  return graph.leaf({static_cast<std::int64_t>(indices.size()), video.frames,
                     video.frame_dim},
                    std::move(vals));
}

MatrixR sequential_encode_values(Graph& graph, const EncoderModel& encoder,
                                 const VideoSample& video, int micro_batch) {
  if (micro_batch < 1)
    throw std::invalid_argument("sequential encode: micro-batch must be >= 1");
  EvalScope eval(graph);
  const std::int64_t n = video.n_snippets;
  MatrixR features(n, encoder.config.out_dim);
  for (std::int64_t first = 0; first < n; first += micro_batch) {
    const std::int64_t count = std::min<std::int64_t>(micro_batch, n - first);
    Tensor chunk = snippet_leaf(graph, video, first, count);
    Tensor f = encode(encoder, chunk);
    features.middleRows(first, count) =
        ConstMatMap(f.values().data(), count, encoder.config.out_dim);
  }
  return features;
}

// proposal embeddings for feature-guided APS: mean feature row over the
// span of each proposal
MatrixR proposal_embeddings(const Tensor& features, const ProposalSet& props) {
  const std::int64_t n = features.dim(0), c = features.dim(1);
  ConstMatMap f(features.values().data(), n, c);
  MatrixR prefix = MatrixR::Zero(n + 1, c);
  for (std::int64_t i = 0; i < n; ++i)
    prefix.row(i + 1) = prefix.row(i) + f.row(i);
  MatrixR out(static_cast<std::int64_t>(props.size()), c);
  for (std::size_t i = 0; i < props.size(); ++i) {
    const auto lo = static_cast<std::int64_t>(std::floor(props[i].start));
    const auto hi = std::min<std::int64_t>(
        n - 1, static_cast<std::int64_t>(std::ceil(props[i].end)));
    out.row(static_cast<std::int64_t>(i)) =
        (prefix.row(hi + 1) - prefix.row(lo)) / double(hi + 1 - lo);
  }
  return out;
}

struct DetectorStepOutput {
  Tensor loss_tensor;
  LossBreakdown breakdown;
  std::vector<std::size_t> aps_indices;
  DetectorOutputs outputs;
};

// shared by the SGS stage-2 path and the naive end-to-end baseline so both
// run bitwise-identical detector arithmetic
DetectorStepOutput detector_loss_on_features(Graph& graph,
                                             const DetectorModel& detector,
                                             const Tensor& features,
                                             const std::vector<Segment>& gt,
                                             const ApsConfig& aps,
                                             RngStream& aps_rng) {
  graph.begin_phase(kPhaseDetector);
  const int t = static_cast<int>(detector.config.sequence_length);
  ProposalSet dense = enumerate_proposals(t);

  SampleRequest req;
  req.n_total = dense.size();
  req.ratio = aps.ratio;
  req.strategy = aps.strategy;

  std::vector<std::pair<int, int>> lattice;
  MatrixR embeddings;
  std::vector<double> labels;
  Tensor resized = maybe_resize_features(detector.config, features);
  if (aps.strategy == SamplerKind::kGrid || aps.strategy == SamplerKind::kBlock) {
    lattice.reserve(dense.size());
    for (const Proposal& p : dense) lattice.emplace_back(p.start_index, p.end_index);
    req.lattice = &lattice;
    req.lattice_t = t;
  } else if (aps.strategy == SamplerKind::kFps ||
             aps.strategy == SamplerKind::kKdpp) {
    embeddings = proposal_embeddings(resized, dense);
    req.embeddings = &embeddings;
  } else if (aps.strategy == SamplerKind::kIouBalanced) {
    labels.reserve(dense.size());
    for (const Proposal& p : dense) {
      double best = 0.0;
      for (const Segment& s : gt) best = std::max(best, tiou(p.segment(), s));
      labels.push_back(best);
    }
    req.labels = &labels;
  } else if (aps.strategy == SamplerKind::kScaleBalanced) {
    labels.reserve(dense.size());
    for (const Proposal& p : dense) labels.push_back(p.duration() / double(t));
    req.labels = &labels;
  }

  DetectorStepOutput out;
  out.aps_indices = sample(req, aps_rng);
  ProposalSet sampled;
  sampled.reserve(out.aps_indices.size());
  for (std::size_t i : out.aps_indices) sampled.push_back(dense[i]);

  Tensor enhanced = enhance(detector, resized);
  auto [sp, ep] = boundary_head(detector, enhanced);
  out.outputs = detector_cascade(detector, enhanced, std::move(sp),
                                 std::move(ep), sampled);
  auto [loss_t, bd] = compute_loss(detector, out.outputs, gt);
  if (!std::isfinite(bd.total))
    throw std::runtime_error("detector step: non-finite loss (" +
                             std::to_string(bd.total) + "), aborting iteration");
  out.loss_tensor = loss_t;
  out.breakdown = bd;
  return out;
}

}  // namespace

Tensor stage1_sequential_encode(Graph& graph, const EncoderModel& encoder,
                                const VideoSample& video, int micro_batch) {
  graph.begin_phase(kPhaseEncoderForward);
  MatrixR features =
      sequential_encode_values(graph, encoder, video, micro_batch);
  return graph.leaf({features.rows(), features.cols()},
                    Eigen::Map<const ArrayX>(features.data(), features.size()),
                    /*requires_grad=*/true);
}

Tensor parallel_encode(Graph& graph, const EncoderModel& encoder,
                       const VideoSample& video, bool requires_grad) {
  EvalScope eval(graph);
  Tensor all = snippet_leaf(graph, video, 0, video.n_snippets);
  Tensor f = encode(encoder, all);
  return graph.leaf(f.shape(), f.values(), requires_grad);
}

Stage2Result stage2_detector_step(Graph& graph, const DetectorModel& detector,
                                  const Tensor& features,
                                  const std::vector<Segment>& gt,
                                  const ApsConfig& aps, RngStream& aps_rng) {
  if (!features.is_leaf() || !features.requires_grad())
    throw std::invalid_argument(
        "stage2: features must be a detached requires-grad leaf");
  DetectorStepOutput step =
      detector_loss_on_features(graph, detector, features, gt, aps, aps_rng);
  graph.backward_scalar(step.loss_tensor);

  Stage2Result result;
  result.loss = step.breakdown;
  result.aps_indices = std::move(step.aps_indices);
  result.outputs = std::move(step.outputs);
  const std::int64_t n = features.dim(0), c = features.dim(1);
  if (features.has_grad())
    result.feature_grads = ConstMatMap(features.grad().data(), n, c);
  else
    result.feature_grads = MatrixR::Zero(n, c);
  if (!result.feature_grads.allFinite())
    throw std::runtime_error("stage2: non-finite feature gradients");
  graph.clear_tape();
  return result;
}

void stage3_sampled_update(Graph& graph, const EncoderModel& encoder,
                           const VideoSample& video,
                           const MatrixR& feature_grads, const SgsConfig& sgs,
                           RngStream& sgs_rng) {
  if (sgs.gamma == 0.0) return;  // frozen encoder
  if (sgs.micro_batch < 1)
    throw std::invalid_argument("stage3: micro-batch must be >= 1");
  graph.begin_phase(kPhaseEncoderUpdate);

  const std::int64_t n = video.n_snippets;
  SampleRequest req;
  req.n_total = static_cast<std::size_t>(n);
  req.ratio = sgs.gamma;
  req.strategy = sgs.snippet_sampler;
  MatrixR embeddings;
  if (sgs.snippet_sampler == SamplerKind::kFps ||
      sgs.snippet_sampler == SamplerKind::kKdpp) {
    // snippet embeddings are the feature rows the gradients refer to; the
    // gradient matrix has the right alignment only when N matches, so use
    // the raw frame content means otherwise
    embeddings = MatrixR(n, video.frames * video.frame_dim);
    for (std::int64_t t = 0; t < n; ++t)
      embeddings.row(t) = ConstMatMap(video.snippets.data(), n,
                                      video.frames * video.frame_dim)
                              .row(t);
    req.embeddings = &embeddings;
  }
  std::vector<std::size_t> indices = sample(req, sgs_rng);

  const double grad_scale = sgs.rescale_sampled_grads ? 1.0 / sgs.gamma : 1.0;
  const std::int64_t c = feature_grads.cols();
  for (std::size_t first = 0; first < indices.size();
       first += static_cast<std::size_t>(sgs.micro_batch)) {
    const std::size_t count =
        std::min<std::size_t>(static_cast<std::size_t>(sgs.micro_batch),
                              indices.size() - first);
    std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(first),
                                   indices.begin() + static_cast<std::ptrdiff_t>(first + count));
    Tensor x = gather_snippet_leaf(graph, video, chunk);
    Tensor feats = encode(encoder, x);
    MatrixR seed(static_cast<std::int64_t>(count), c);
    for (std::size_t i = 0; i < count; ++i)
      seed.row(static_cast<std::int64_t>(i)) =
          grad_scale * feature_grads.row(static_cast<std::int64_t>(chunk[i]));
    Tensor seed_t =
        graph.leaf({static_cast<std::int64_t>(count), c},
                   Eigen::Map<const ArrayX>(seed.data(), seed.size()));
    graph.backward(feats, seed_t);
    graph.clear_tape();
  }
}

NaiveResult naive_e2e_step(Graph& graph, const EncoderModel& encoder,
                           const DetectorModel& detector,
                           const VideoSample& video,
                           const std::vector<Segment>& gt,
                           const ApsConfig& aps, RngStream& aps_rng) {
  graph.begin_phase(kPhaseEncoderForward);
  Tensor x = snippet_leaf(graph, video, 0, video.n_snippets);
  Tensor features = encode(encoder, x);  // train mode, full batch
  DetectorStepOutput step =
      detector_loss_on_features(graph, detector, features, gt, aps, aps_rng);
  graph.backward_scalar(step.loss_tensor);
  graph.clear_tape();
  NaiveResult r;
  r.loss = step.breakdown;
  r.aps_indices = std::move(step.aps_indices);
  return r;
}

std::vector<Detection> infer(Graph& graph, const EncoderModel& encoder,
                             const DetectorModel& detector,
                             const VideoSample& video, const InferConfig& cfg,
                             int micro_batch) {
  EvalScope eval(graph);
  graph.begin_phase(kPhaseInfer);
  MatrixR fvals = sequential_encode_values(graph, encoder, video, micro_batch);
  Tensor features =
      graph.leaf({fvals.rows(), fvals.cols()},
                 Eigen::Map<const ArrayX>(fvals.data(), fvals.size()));

  Tensor resized = maybe_resize_features(detector.config, features);
  Tensor enhanced = enhance(detector, resized);
  auto [start_prob, end_prob] = boundary_head(detector, enhanced);

  const std::int64_t n = detector.config.sequence_length;
  std::vector<double> sp(static_cast<std::size_t>(n)), epb(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    sp[static_cast<std::size_t>(i)] = start_prob.value_at(i);
    epb[static_cast<std::size_t>(i)] = end_prob.value_at(i);
  }

  ProposalSet candidates;
  if (cfg.use_enumeration) {
    candidates = enumerate_proposals(static_cast<int>(n));
  } else {
    for (const auto& [s, e] : select_boundaries(sp, epb))
      candidates.push_back(Proposal{double(s), double(e), s, e});
  }
  if (candidates.empty()) return {};

  if (cfg.aps_ratio < 1.0) {
    SampleRequest req;
    req.n_total = candidates.size();
    req.ratio = cfg.aps_ratio;
    req.strategy = SamplerKind::kGrid;
    std::vector<std::pair<int, int>> lattice;
    lattice.reserve(candidates.size());
    for (const Proposal& p : candidates)
      lattice.emplace_back(p.start_index, p.end_index);
    req.lattice = &lattice;
    req.lattice_t = static_cast<int>(n);
    RngStream rng(0, "infer_aps");  // grid sampling is deterministic anyway
    std::vector<std::size_t> keep = sample(req, rng);
    ProposalSet sub;
    sub.reserve(keep.size());
    for (std::size_t i : keep) sub.push_back(candidates[i]);
    candidates = std::move(sub);
  }

  DetectorOutputs outs = detector_cascade(detector, enhanced, start_prob,
                                          end_prob, candidates);

  // final boundary: mean of the three per-stage refined boundaries
  const std::size_t p = candidates.size();
  std::vector<Detection> detections;
  detections.reserve(p);
  const PemOutput& last = outs.stages.back().pem;
  for (std::size_t i = 0; i < p; ++i) {
    double s_sum = 0.0, e_sum = 0.0;
    int stages = 0;
    for (std::size_t st = 1; st < outs.stages.size(); ++st) {
      s_sum += outs.stages[st].proposals[i].start;
      e_sum += outs.stages[st].proposals[i].end;
      ++stages;
    }
    s_sum += outs.final_proposals[i].start;
    e_sum += outs.final_proposals[i].end;
    ++stages;

    Detection d;
    d.video_id = video.video_id;
    d.start = s_sum / double(stages);
    d.end = e_sum / double(stages);
    if (d.end - d.start < 1e-3) continue;
    const auto ii = static_cast<std::int64_t>(i);
    d.p_start = sp[static_cast<std::size_t>(candidates[i].start_index)];
    d.p_end = epb[static_cast<std::size_t>(candidates[i].end_index)];
    d.p_iou = last.iou.value_at(2 * ii) * last.iou.value_at(2 * ii + 1);
    d.score = fuse_scores(d.p_start, d.p_end, d.p_iou);
    detections.push_back(d);
  }
  return soft_nms(std::move(detections), cfg.nms);
}

// ---- trainer ----

Trainer::Trainer(const RunConfig& config, const Dataset& dataset)
    : config_(config), dataset_(dataset) {
  if (config.encoder.out_dim != config.detector.feature_dim)
    throw std::invalid_argument(
        "trainer: encoder out_dim must equal detector feature_dim");
  if (config.encoder.frame_dim != config.dataset.frame_dim ||
      config.encoder.frames != config.dataset.frames)
    throw std::invalid_argument(
        "trainer: encoder frame geometry must match the dataset");
  encoder_ = init_encoder(graph_, config.encoder, config.seed);
  detector_ = init_detector(graph_, config.detector, config.seed);

  auto frozen = [&](const std::string& name) {
    for (const std::string& prefix : config_.sgs.freeze_params)
      if (name.rfind(prefix, 0) == 0) return true;
    return false;
  };
  AdamW::Group det_group, enc_group;
  det_group.lr = config.sgs.lr_detector;
  enc_group.lr = config.sgs.lr_encoder;
  for (const auto& [name, p] : detector_.named_parameters())
    if (!frozen(name)) det_group.params.emplace_back(name, p);
  const bool encoder_trains = config.sgs.gamma > 0.0 || config.naive_e2e;
  if (encoder_trains)
    for (const auto& [name, p] : encoder_.named_parameters())
      if (!frozen(name)) enc_group.params.emplace_back(name, p);
  optimizer_ = std::make_unique<AdamW>(
      std::vector<AdamW::Group>{det_group, enc_group},
      config.sgs.weight_decay);
}

void Trainer::train_one_video(int epoch, int video_index,
                              const VideoSample& video, LossBreakdown& accum) {
  const std::string tag =
      "e" + std::to_string(epoch) + "/v" + std::to_string(video_index);
  RngStream aps_rng(config_.seed, "aps/" + tag);
  std::vector<Segment> gt = video.gt_segments();

  LossBreakdown bd;
  if (config_.naive_e2e) {
    bd = naive_e2e_step(graph_, encoder_, detector_, video, gt, config_.aps,
                        aps_rng)
             .loss;
  } else {
    Tensor features = stage1_sequential_encode(graph_, encoder_, video,
                                               config_.sgs.micro_batch);
    Stage2Result s2 = stage2_detector_step(graph_, detector_, features, gt,
                                           config_.aps, aps_rng);
    RngStream sgs_rng(config_.seed, "sgs/" + tag);
    stage3_sampled_update(graph_, encoder_, video, s2.feature_grads,
                          config_.sgs, sgs_rng);
    bd = s2.loss;
  }

  accum.l_bd_s += bd.l_bd_s;
  accum.total += bd.total;
  if (accum.l_bd_p.empty()) {
    accum.l_bd_p = bd.l_bd_p;
    accum.l_iou = bd.l_iou;
    accum.l_secw = bd.l_secw;
  } else {
    for (std::size_t i = 0; i < bd.l_bd_p.size(); ++i) {
      accum.l_bd_p[i] += bd.l_bd_p[i];
      accum.l_iou[i] += bd.l_iou[i];
      accum.l_secw[i] += bd.l_secw[i];
    }
  }
}

EvalResult Trainer::evaluate(const std::vector<VideoSample>& videos,
                             const InferConfig& cfg) {
  std::vector<Detection> all;
  std::map<std::string, std::vector<Segment>> gt;
  for (const VideoSample& v : videos) {
    std::vector<Detection> d =
        infer(graph_, encoder_, detector_, v, cfg, config_.sgs.micro_batch);
    all.insert(all.end(), d.begin(), d.end());
    gt[v.video_id] = v.gt_segments();
  }
  return compute_map(all, gt, config_.eval_thresholds);
}

TrainResult Trainer::run() {
  TrainResult result;
  const int n_videos = static_cast<int>(dataset_.train.size());
  const int batch = std::max(1, config_.sgs.batch_videos);

  InferConfig eval_cfg = config_.infer;
  eval_cfg.aps_ratio = config_.train_eval_aps_ratio;
  eval_cfg.use_enumeration = config_.train_eval_use_enumeration;

  for (int epoch = 1; epoch <= config_.sgs.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double decay =
        epoch > config_.sgs.lr_decay_after ? config_.sgs.lr_decay : 1.0;
    optimizer_->set_lr(0, config_.sgs.lr_detector * decay);
    optimizer_->set_lr(1, config_.sgs.lr_encoder * decay);

    LossBreakdown accum;
    accum.lambda = config_.detector.loss_lambda;
    for (int first = 0; first < n_videos; first += batch) {
      const int count = std::min(batch, n_videos - first);
      for (int i = 0; i < count; ++i)
        train_one_video(epoch, first + i, dataset_.train[static_cast<std::size_t>(first + i)],
                        accum);
      // mean gradient over the batch's videos
      const double inv = 1.0 / double(count);
      auto enc_params = encoder_.named_parameters();
      auto det_params = detector_.named_parameters();
      for (auto& [_, p] : enc_params)
        if (p.has_grad()) p.grad_ref() *= inv;
      for (auto& [_, p] : det_params)
        if (p.has_grad()) p.grad_ref() *= inv;
      optimizer_->step();
    }

    EpochMetrics row;
    row.epoch = epoch;
    row.mean_loss = accum;
    const double inv_videos = n_videos > 0 ? 1.0 / double(n_videos) : 0.0;
    row.mean_loss.l_bd_s *= inv_videos;
    row.mean_loss.total *= inv_videos;
    for (auto& v : row.mean_loss.l_bd_p) v *= inv_videos;
    for (auto& v : row.mean_loss.l_iou) v *= inv_videos;
    for (auto& v : row.mean_loss.l_secw) v *= inv_videos;

    EvalResult er = evaluate(dataset_.val, eval_cfg);
    row.avg_map = er.average_map;
    row.per_threshold_ap = er.ap;

    MemoryReport mem = graph_.memory_report();
    row.peak_bytes_encoder_forward = mem.peak(kPhaseEncoderForward);
    row.peak_bytes_detector = mem.peak(kPhaseDetector);
    row.peak_bytes_encoder_update = mem.peak(kPhaseEncoderUpdate);
    const FlopLedger& fl = graph_.read_flops();
    row.forward_flops_encoder = fl.forward_in(kPhaseEncoderForward) +
                                fl.forward_in(kPhaseEncoderUpdate);
    row.backward_flops_encoder = fl.backward_in(kPhaseEncoderForward) +
                                 fl.backward_in(kPhaseEncoderUpdate);
    row.forward_flops_detector = fl.forward_in(kPhaseDetector);
    row.backward_flops_detector = fl.backward_in(kPhaseDetector);
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.history.push_back(std::move(row));
  }
  result.final_avg_map =
      result.history.empty() ? 0.0 : result.history.back().avg_map;
  return result;
}

}  // namespace etad
