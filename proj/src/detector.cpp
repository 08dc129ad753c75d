#include "etad/detector.hpp"

#include "etad/ops.hpp"
#include "etad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace etad {

namespace {

constexpr double kMinWidth = 1e-3;  // snippet units, degenerate repair
constexpr double kLogEps = 1e-12;

ArrayX uniform_init(RngStream& rng, std::int64_t n, std::int64_t fan_in) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  ArrayX a(n);
  for (std::int64_t i = 0; i < n; ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

GruCell init_gru(Graph& g, RngStream& rng, std::int64_t c) {
  GruCell cell;
  cell.wz = g.parameter({c, c}, uniform_init(rng, c * c, c));
  cell.uz = g.parameter({c, c}, uniform_init(rng, c * c, c));
  cell.bz = g.parameter({c}, ArrayX::Zero(c));
  cell.wh = g.parameter({c, c}, uniform_init(rng, c * c, c));
  cell.uh = g.parameter({c, c}, uniform_init(rng, c * c, c));
  cell.bh = g.parameter({c}, ArrayX::Zero(c));
  return cell;
}

MlpHead init_head(Graph& g, RngStream& rng, std::int64_t in_dim,
                  const std::vector<std::int64_t>& hidden,
                  std::int64_t out_dim) {
  MlpHead head;
  std::int64_t prev = in_dim;
  for (std::int64_t h : hidden) {
    head.w.push_back(g.parameter({prev, h}, uniform_init(rng, prev * h, prev)));
    head.b.push_back(g.parameter({h}, ArrayX::Zero(h)));
    prev = h;
  }
  head.w.push_back(
      g.parameter({prev, out_dim}, uniform_init(rng, prev * out_dim, prev)));
  head.b.push_back(g.parameter({out_dim}, ArrayX::Zero(out_dim)));
  return head;
}

Tensor head_forward(const MlpHead& head, const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < head.w.size(); ++i) {
    h = add(matmul(h, head.w[i]), head.b[i]);
    if (i + 1 < head.w.size()) h = relu(h);
  }
  return h;
}

// one direction of the minimal gated recurrent cell; steps iterates either
// 0..N-1 or N-1..0, outputs are stored at their sequence position
Tensor gru_direction(const GruCell& cell, const Tensor& features,
                     bool reverse) {
  Graph& g = *features.graph();
  const std::int64_t n = features.dim(0), c = features.dim(1);
  Tensor xz = add(matmul(features, cell.wz), cell.bz);
  Tensor xh = add(matmul(features, cell.wh), cell.bh);
  Tensor h = g.zeros({1, c});
  std::vector<Tensor> parts(static_cast<std::size_t>(n));
  for (std::int64_t step = 0; step < n; ++step) {
    const std::int64_t t = reverse ? n - 1 - step : step;
    Tensor z = sigmoid(add(slice_rows(xz, t, 1), matmul(h, cell.uz)));
    Tensor cand = etad::tanh(add(slice_rows(xh, t, 1), matmul(h, cell.uh)));
    // h' = h + z * (cand - h)
    h = add(h, mul(z, sub(cand, h)));
    parts[static_cast<std::size_t>(t)] = h;
  }
  return concat_rows(parts);
}

void append_params(std::vector<std::pair<std::string, Tensor>>& out,
                   const std::string& prefix, const MlpHead& head) {
  for (std::size_t i = 0; i < head.w.size(); ++i) {
    out.emplace_back(prefix + ".w" + std::to_string(i), head.w[i]);
    out.emplace_back(prefix + ".b" + std::to_string(i), head.b[i]);
  }
}

void append_params(std::vector<std::pair<std::string, Tensor>>& out,
                   const std::string& prefix, const GruCell& cell) {
  out.emplace_back(prefix + ".wz", cell.wz);
  out.emplace_back(prefix + ".uz", cell.uz);
  out.emplace_back(prefix + ".bz", cell.bz);
  out.emplace_back(prefix + ".wh", cell.wh);
  out.emplace_back(prefix + ".uh", cell.uh);
  out.emplace_back(prefix + ".bh", cell.bh);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> DetectorModel::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  append_params(out, "detector.gru_fwd", gru_fwd);
  append_params(out, "detector.gru_bwd", gru_bwd);
  out.emplace_back("detector.enh_conv1_w", enh_conv1_w);
  out.emplace_back("detector.enh_conv1_b", enh_conv1_b);
  out.emplace_back("detector.enh_gn1_gamma", enh_gn1_gamma);
  out.emplace_back("detector.enh_gn1_beta", enh_gn1_beta);
  out.emplace_back("detector.enh_conv2_w", enh_conv2_w);
  out.emplace_back("detector.enh_conv2_b", enh_conv2_b);
  out.emplace_back("detector.enh_gn2_gamma", enh_gn2_gamma);
  out.emplace_back("detector.enh_gn2_beta", enh_gn2_beta);
  out.emplace_back("detector.bd_conv_w", bd_conv_w);
  out.emplace_back("detector.bd_conv_b", bd_conv_b);
  out.emplace_back("detector.bd_start_w", bd_start_w);
  out.emplace_back("detector.bd_start_b", bd_start_b);
  out.emplace_back("detector.bd_end_w", bd_end_w);
  out.emplace_back("detector.bd_end_b", bd_end_b);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string p = "detector.pem" + std::to_string(s + 1);
    append_params(out, p + ".offset", stages[s].offset);
    append_params(out, p + ".boundary_cls", stages[s].boundary_cls);
    append_params(out, p + ".center_width", stages[s].center_width);
    append_params(out, p + ".iou", stages[s].iou);
  }
  return out;
}

std::int64_t DetectorModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : named_parameters()) n += t.size();
  return n;
}

DetectorModel init_detector(Graph& graph, const DetectorConfig& config,
                            std::uint64_t seed) {
  const std::int64_t c = config.feature_dim;
  if (c % config.group_norm_groups != 0)
    throw std::invalid_argument(
        "init_detector: feature dim " + std::to_string(c) +
        " not divisible by group-norm groups " +
        std::to_string(config.group_norm_groups));
  if (config.enhance_cell != "mgu")
    throw std::invalid_argument("init_detector: unknown enhance cell '" +
                                config.enhance_cell + "'");

  RngStream rng(seed, "detector_init");
  DetectorModel m;
  m.config = config;
  m.gru_fwd = init_gru(graph, rng, c);
  m.gru_bwd = init_gru(graph, rng, c);
  m.enh_conv1_w = graph.parameter({c, c, 3}, uniform_init(rng, c * c * 3, c * 3));
  m.enh_conv1_b = graph.parameter({c}, ArrayX::Zero(c));
  m.enh_gn1_gamma = graph.parameter({c}, ArrayX::Ones(c));
  m.enh_gn1_beta = graph.parameter({c}, ArrayX::Zero(c));
  m.enh_conv2_w = graph.parameter({c, c, 3}, uniform_init(rng, c * c * 3, c * 3));
  m.enh_conv2_b = graph.parameter({c}, ArrayX::Zero(c));
  m.enh_gn2_gamma = graph.parameter({c}, ArrayX::Ones(c));
  m.enh_gn2_beta = graph.parameter({c}, ArrayX::Zero(c));

  const std::int64_t bh = config.boundary_hidden;
  m.bd_conv_w = graph.parameter({bh, c, 3}, uniform_init(rng, bh * c * 3, c * 3));
  m.bd_conv_b = graph.parameter({bh}, ArrayX::Zero(bh));
  m.bd_start_w = graph.parameter({1, bh, 3}, uniform_init(rng, bh * 3, bh * 3));
  m.bd_start_b = graph.parameter({1}, ArrayX::Zero(1));
  m.bd_end_w = graph.parameter({1, bh, 3}, uniform_init(rng, bh * 3, bh * 3));
  m.bd_end_b = graph.parameter({1}, ArrayX::Zero(1));

  const std::int64_t in_b = config.roi_boundary_bins * c;
  const std::int64_t in_e = config.roi_extended_bins * c;
  for (int s = 0; s < config.stages(); ++s) {
    PemStage stage;
    stage.offset = init_head(graph, rng, in_b, config.pem_fc_dims, 1);
    stage.boundary_cls = init_head(graph, rng, in_b, config.pem_fc_dims, 1);
    stage.center_width = init_head(graph, rng, in_e, config.pem_fc_dims, 2);
    stage.iou = init_head(graph, rng, in_e, config.pem_fc_dims, 2);
    m.stages.push_back(std::move(stage));
  }
  return m;
}

Tensor enhance(const DetectorModel& model, const Tensor& features) {
  const DetectorConfig& cfg = model.config;
  if (features.rank() != 2 || features.dim(1) != cfg.feature_dim)
    throw std::invalid_argument("enhance: expected (N," +
                                std::to_string(cfg.feature_dim) +
                                ") features, got " +
                                shape_str(features.shape()));
  if (cfg.feature_dim % cfg.group_norm_groups != 0)
    throw std::invalid_argument("enhance: group-norm group mismatch");
  const std::int64_t n = features.dim(0), c = features.dim(1);

  Tensor context = add(gru_direction(model.gru_fwd, features, false),
                       gru_direction(model.gru_bwd, features, true));
  Tensor x = add(features, context);  // residual connection

  Tensor h = conv1d(reshape(x, {1, n, c}), model.enh_conv1_w, model.enh_conv1_b);
  h = relu(group_norm(reshape(h, {n, c}), model.enh_gn1_gamma,
                      model.enh_gn1_beta, cfg.group_norm_groups));
  h = conv1d(reshape(h, {1, n, c}), model.enh_conv2_w, model.enh_conv2_b);
  h = relu(group_norm(reshape(h, {n, c}), model.enh_gn2_gamma,
                      model.enh_gn2_beta, cfg.group_norm_groups));
  return h;
}

std::pair<Tensor, Tensor> boundary_head(const DetectorModel& model,
                                        const Tensor& enhanced) {
  const std::int64_t n = enhanced.dim(0), c = enhanced.dim(1);
  Tensor trunk = relu(
      conv1d(reshape(enhanced, {1, n, c}), model.bd_conv_w, model.bd_conv_b));
  Tensor start = sigmoid(reshape(
      conv1d(trunk, model.bd_start_w, model.bd_start_b), {n, 1}));
  Tensor end = sigmoid(reshape(
      conv1d(trunk, model.bd_end_w, model.bd_end_b), {n, 1}));
  return {start, end};
}

ProposalFeatures roi_align(const DetectorConfig& config,
                           const Tensor& enhanced,
                           const ProposalSet& proposals) {
  const std::int64_t c = enhanced.dim(1);
  const std::int64_t p = static_cast<std::int64_t>(proposals.size());
  const int bb = config.roi_boundary_bins;
  const int be = config.roi_extended_bins;

  std::vector<double> pos_start, pos_end, pos_ext;
  pos_start.reserve(p * bb);
  pos_end.reserve(p * bb);
  pos_ext.reserve(p * be);
  auto span_positions = [](std::vector<double>& out, double a, double b,
                           int bins) {
    for (int j = 0; j < bins; ++j)
      out.push_back(a + (b - a) * double(j) / double(bins - 1));
  };
  for (const Proposal& pr : proposals) {
    const double d = pr.duration();
    if (d <= 0.0)
      throw std::invalid_argument("roi_align: degenerate proposal [" +
                                  std::to_string(pr.start) + "," +
                                  std::to_string(pr.end) + ")");
    span_positions(pos_start, pr.start - config.roi_boundary * d,
                   pr.start + config.roi_boundary * d, bb);
    span_positions(pos_end, pr.end - config.roi_boundary * d,
                   pr.end + config.roi_boundary * d, bb);
    span_positions(pos_ext, pr.start - config.roi_extension * d,
                   pr.end + config.roi_extension * d, be);
  }

  ProposalFeatures out;
  out.start = lerp_gather(enhanced, pos_start, bb);
  out.end = lerp_gather(enhanced, pos_end, bb);
  out.extended = lerp_gather(enhanced, pos_ext, be);
  (void)p;
  (void)c;
  return out;
}

PemOutput pem_forward(const DetectorModel& model, int stage,
                      const ProposalFeatures& feats) {
  if (stage < 1 || stage > model.config.stages())
    throw std::invalid_argument("pem_forward: stage " + std::to_string(stage) +
                                " out of range");
  const PemStage& head = model.stages[static_cast<std::size_t>(stage - 1)];
  const Tensor& fs = feats.start;
  const Tensor& fe = feats.end;
  const Tensor& fx = feats.extended;

  PemOutput out;
  out.offset_start = head_forward(head.offset, fs);
  out.offset_end = head_forward(head.offset, fe);
  out.prop_startness = sigmoid(head_forward(head.boundary_cls, fs));
  out.prop_endness = sigmoid(head_forward(head.boundary_cls, fe));
  out.center_width = head_forward(head.center_width, fx);
  out.iou = sigmoid(head_forward(head.iou, fx));
  return out;
}

ProposalSet refine(const ProposalSet& proposals, const PemOutput& out,
                   double sequence_length) {
  ProposalSet refined;
  refined.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const Proposal& pr = proposals[i];
    const double d = pr.duration();
    const auto ii = static_cast<std::int64_t>(i);
    const double ds = out.offset_start.value_at(ii);
    const double de = out.offset_end.value_at(ii);
    const double dc = out.center_width.value_at(2 * ii);
    const double dlogw = out.center_width.value_at(2 * ii + 1);

    const double s_b = pr.start + ds * d;
    const double e_b = pr.end + de * d;
    const double center = 0.5 * (pr.start + pr.end) + dc * d;
    const double width = d * std::exp(dlogw);
    const double s_c = center - 0.5 * width;
    const double e_c = center + 0.5 * width;

    double s = 0.5 * (s_b + s_c);
    double e = 0.5 * (e_b + e_c);
    s = std::clamp(s, 0.0, sequence_length);
    e = std::clamp(e, 0.0, sequence_length);
    if (s > e) std::swap(s, e);
    if (e - s < kMinWidth) {  // degenerate: pad to a minimal width
      e = std::min(sequence_length, s + kMinWidth);
      s = std::max(0.0, e - kMinWidth);
    }
    refined.push_back(Proposal{s, e, pr.start_index, pr.end_index});
  }
  return refined;
}

SnippetLabels assign_snippet_labels(const std::vector<Segment>& gt,
                                    std::int64_t n, double halfwidth) {
  SnippetLabels labels;
  labels.start.assign(static_cast<std::size_t>(n), 0.0);
  labels.end.assign(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t t = 0; t < n; ++t) {
    for (const Segment& s : gt) {
      if (std::abs(double(t) - s.start) <= halfwidth)
        labels.start[static_cast<std::size_t>(t)] = 1.0;
      if (std::abs(double(t) - s.end) <= halfwidth)
        labels.end[static_cast<std::size_t>(t)] = 1.0;
    }
  }
  return labels;
}

StageLabels assign_labels(const DetectorConfig& config,
                          const std::vector<Segment>& gt,
                          const ProposalSet& proposals, int stage) {
  if (stage < 1 || stage > config.stages())
    throw std::invalid_argument("assign_labels: stage out of range");
  const double threshold =
      config.stage_iou_thresholds[static_cast<std::size_t>(stage - 1)];
  const double hw = config.boundary_label_halfwidth;

  StageLabels labels;
  const std::size_t p = proposals.size();
  labels.prop_start.assign(p, 0.0);
  labels.prop_end.assign(p, 0.0);
  labels.iou_target.assign(p, 0.0);
  labels.matched_gt.assign(p, -1);
  labels.positive.assign(p, 0);

  for (std::size_t i = 0; i < p; ++i) {
    const Proposal& pr = proposals[i];
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double o = tiou(pr.segment(), gt[g]);
      if (o > labels.iou_target[i]) {
        labels.iou_target[i] = o;
        labels.matched_gt[i] = static_cast<int>(g);
      }
      if (std::abs(pr.start - gt[g].start) <= hw) labels.prop_start[i] = 1.0;
      if (std::abs(pr.end - gt[g].end) <= hw) labels.prop_end[i] = 1.0;
    }
    labels.positive[i] = labels.iou_target[i] >= threshold ? 1 : 0;
  }
  return labels;
}

Tensor maybe_resize_features(const DetectorConfig& config,
                             const Tensor& features) {
  const std::int64_t n = features.dim(0);
  if (n == config.sequence_length) return features;
  std::vector<double> positions(
      static_cast<std::size_t>(config.sequence_length));
  for (std::int64_t i = 0; i < config.sequence_length; ++i)
    positions[static_cast<std::size_t>(i)] =
        double(i) * double(n - 1) / double(config.sequence_length - 1);
  return lerp_gather(features, positions);
}

DetectorOutputs detector_cascade(const DetectorModel& model,
                                 const Tensor& enhanced, Tensor start_prob,
                                 Tensor end_prob,
                                 const ProposalSet& proposals) {
  DetectorOutputs out;
  out.start_prob = std::move(start_prob);
  out.end_prob = std::move(end_prob);
  ProposalSet current = proposals;
  for (int stage = 1; stage <= model.config.stages(); ++stage) {
    StageOutput so;
    so.proposals = current;
    so.pem = pem_forward(model, stage,
                         roi_align(model.config, enhanced, current));
    current = refine(so.proposals, so.pem,
                     double(model.config.sequence_length));
    out.stages.push_back(std::move(so));
  }
  out.final_proposals = std::move(current);
  return out;
}

DetectorOutputs detector_forward(const DetectorModel& model,
                                 const Tensor& features,
                                 const ProposalSet& proposals) {
  Tensor resized = maybe_resize_features(model.config, features);
  Tensor enhanced = enhance(model, resized);
  auto [start_prob, end_prob] = boundary_head(model, enhanced);
  return detector_cascade(model, enhanced, std::move(start_prob),
                          std::move(end_prob), proposals);
}

DetectorOutputs detector_forward_fixed(
    const DetectorModel& model, const Tensor& features,
    const std::vector<ProposalSet>& stage_sets) {
  if (static_cast<int>(stage_sets.size()) != model.config.stages())
    throw std::invalid_argument(
        "detector_forward_fixed: need one proposal set per stage");
  Tensor resized = maybe_resize_features(model.config, features);
  Tensor enhanced = enhance(model, resized);
  DetectorOutputs out;
  std::tie(out.start_prob, out.end_prob) = boundary_head(model, enhanced);
  for (int stage = 1; stage <= model.config.stages(); ++stage) {
    StageOutput so;
    so.proposals = stage_sets[static_cast<std::size_t>(stage - 1)];
    so.pem = pem_forward(model, stage,
                         roi_align(model.config, enhanced, so.proposals));
    out.final_proposals = refine(so.proposals, so.pem,
                                 double(model.config.sequence_length));
    out.stages.push_back(std::move(so));
  }
  return out;
}

Tensor balanced_bce(Graph& graph, const Tensor& prob,
                    const std::vector<double>& labels,
                    const std::vector<char>* valid) {
  const std::int64_t m = prob.size();
  if (static_cast<std::int64_t>(labels.size()) != m)
    throw std::invalid_argument("balanced_bce: label count mismatch");
  std::int64_t n_pos = 0, n_neg = 0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (valid && !(*valid)[static_cast<std::size_t>(i)]) continue;
    if (labels[static_cast<std::size_t>(i)] > 0.5)
      ++n_pos;
    else
      ++n_neg;
  }
  ArrayX w_pos = ArrayX::Zero(m), w_neg = ArrayX::Zero(m);
  for (std::int64_t i = 0; i < m; ++i) {
    if (valid && !(*valid)[static_cast<std::size_t>(i)]) continue;
    if (labels[static_cast<std::size_t>(i)] > 0.5) {
      if (n_pos > 0) w_pos[i] = 1.0 / (2.0 * double(n_pos));
    } else {
      if (n_neg > 0) w_neg[i] = 1.0 / (2.0 * double(n_neg));
    }
  }
  // log(p(1-eps) + eps) keeps both sides finite and nonnegative at p in
  // {0, 1}
  Tensor flat = reshape(prob, {m});
  Tensor squashed = add(scale(flat, 1.0 - kLogEps), graph.scalar(kLogEps));
  Tensor log_p = etad::log(squashed);
  Tensor log_q = etad::log(add(scale(flat, -(1.0 - kLogEps)), graph.scalar(1.0)));
  Tensor pos_term = sum_all(mul(log_p, graph.leaf({m}, ArrayX(w_pos))));
  Tensor neg_term = sum_all(mul(log_q, graph.leaf({m}, ArrayX(w_neg))));
  return scale(add(pos_term, neg_term), -1.0);
}

std::pair<Tensor, LossBreakdown> compute_loss(const DetectorModel& model,
                                              const DetectorOutputs& outputs,
                                              const std::vector<Segment>& gt) {
  Graph& g = *outputs.start_prob.graph();
  const DetectorConfig& cfg = model.config;
  const std::int64_t n = outputs.start_prob.dim(0);

  LossBreakdown bd;
  bd.lambda = cfg.loss_lambda;

  SnippetLabels snip = assign_snippet_labels(gt, n, cfg.boundary_label_halfwidth);
  Tensor l_bd_s = add(balanced_bce(g, outputs.start_prob, snip.start),
                      balanced_bce(g, outputs.end_prob, snip.end));
  bd.l_bd_s = l_bd_s.value_at(0);
  Tensor total = l_bd_s;

  for (int stage = 1; stage <= cfg.stages(); ++stage) {
    const StageOutput& so = outputs.stages[static_cast<std::size_t>(stage - 1)];
    const std::size_t p = so.proposals.size();
    StageLabels labels = assign_labels(cfg, gt, so.proposals, stage);

    // proposal startness/endness classification
    Tensor l_bd_p =
        add(balanced_bce(g, so.pem.prop_startness, labels.prop_start),
            balanced_bce(g, so.pem.prop_endness, labels.prop_end));

    // iou head: balanced BCE on binarized targets (ignore band between) +
    // L2 regression on the raw targets over all proposals
    std::vector<double> iou_cls_labels(p, 0.0);
    std::vector<char> iou_valid(p, 0);
    ArrayX iou_targets(static_cast<std::int64_t>(p));
    for (std::size_t i = 0; i < p; ++i) {
      iou_targets[static_cast<std::int64_t>(i)] = labels.iou_target[i];
      if (labels.iou_target[i] >= cfg.iou_pos_threshold) {
        iou_cls_labels[i] = 1.0;
        iou_valid[i] = 1;
      } else if (labels.iou_target[i] <= cfg.iou_neg_threshold) {
        iou_valid[i] = 1;
      }
    }
    const std::int64_t pi = static_cast<std::int64_t>(p);
    // iou tensor is (P,2): column 0 classification, column 1 regression;
    // the columns are separated with constant masks / validity flags
    ArrayX mask_reg = ArrayX::Zero(2 * pi);
    for (std::int64_t i = 0; i < pi; ++i) mask_reg[2 * i + 1] = 1.0;
    Tensor iou_flat = reshape(so.pem.iou, {2 * pi});
    // classification side works on the strided values directly: weights
    // already encode the balancing, zeros elsewhere
    std::vector<double> cls_labels_flat(static_cast<std::size_t>(2 * pi), 0.0);
    std::vector<char> cls_valid_flat(static_cast<std::size_t>(2 * pi), 0);
    for (std::int64_t i = 0; i < pi; ++i) {
      cls_labels_flat[static_cast<std::size_t>(2 * i)] =
          iou_cls_labels[static_cast<std::size_t>(i)];
      cls_valid_flat[static_cast<std::size_t>(2 * i)] =
          iou_valid[static_cast<std::size_t>(i)];
    }
    Tensor l_iou_cls = balanced_bce(g, iou_flat, cls_labels_flat,
                                    &cls_valid_flat);
    // L2 on the regression column, mean over proposals
    ArrayX reg_target_flat = ArrayX::Zero(2 * pi);
    for (std::int64_t i = 0; i < pi; ++i)
      reg_target_flat[2 * i + 1] = iou_targets[i];
    Tensor reg_diff = mul(sub(iou_flat, g.leaf({2 * pi}, reg_target_flat)),
                          g.leaf({2 * pi}, ArrayX(mask_reg)));
    Tensor l_iou_reg = scale(sum_all(mul(reg_diff, reg_diff)), 1.0 / double(p));
    Tensor l_iou = add(l_iou_cls, l_iou_reg);

    // offset regression on positives only, smooth-L1 over the four offsets
    std::size_t n_pos = 0;
    for (char c : labels.positive) n_pos += c;
    Tensor l_secw;
    if (n_pos == 0) {
      l_secw = g.scalar(0.0);
    } else {
      ArrayX t_start(pi), t_end(pi), t_cw(2 * pi);
      ArrayX m_b = ArrayX::Zero(pi), m_cw = ArrayX::Zero(2 * pi);
      for (std::int64_t i = 0; i < pi; ++i) {
        t_start[i] = 0.0;
        t_end[i] = 0.0;
        t_cw[2 * i] = 0.0;
        t_cw[2 * i + 1] = 0.0;
        const std::size_t si = static_cast<std::size_t>(i);
        if (!labels.positive[si]) continue;
        const Segment& gseg = gt[static_cast<std::size_t>(labels.matched_gt[si])];
        const Proposal& pr = so.proposals[si];
        const double d = pr.duration();
        t_start[i] = (gseg.start - pr.start) / d;
        t_end[i] = (gseg.end - pr.end) / d;
        const double pc = 0.5 * (pr.start + pr.end);
        const double gc = 0.5 * (gseg.start + gseg.end);
        t_cw[2 * i] = (gc - pc) / d;
        t_cw[2 * i + 1] = std::log(gseg.length() / d);
        m_b[i] = 1.0;
        m_cw[2 * i] = 1.0;
        m_cw[2 * i + 1] = 1.0;
      }
      Tensor sl_s = mul(smooth_l1(reshape(so.pem.offset_start, {pi}),
                                  g.leaf({pi}, ArrayX(t_start))),
                        g.leaf({pi}, ArrayX(m_b)));
      Tensor sl_e = mul(smooth_l1(reshape(so.pem.offset_end, {pi}),
                                  g.leaf({pi}, ArrayX(t_end))),
                        g.leaf({pi}, ArrayX(m_b)));
      Tensor sl_cw = mul(smooth_l1(reshape(so.pem.center_width, {2 * pi}),
                                   g.leaf({2 * pi}, ArrayX(t_cw))),
                         g.leaf({2 * pi}, ArrayX(m_cw)));
      Tensor sl_sum =
          add(add(sum_all(sl_s), sum_all(sl_e)), sum_all(sl_cw));
      l_secw = scale(sl_sum, 1.0 / double(n_pos));
    }

    bd.l_bd_p.push_back(l_bd_p.value_at(0));
    bd.l_iou.push_back(l_iou.value_at(0));
    bd.l_secw.push_back(l_secw.value_at(0));
    total = add(total, add(add(l_bd_p, l_iou), scale(l_secw, cfg.loss_lambda)));
  }

  bd.total = total.value_at(0);
  return {total, bd};
}

}  // namespace etad
