#include <doctest.h>

#include "etad/config.hpp"
#include "etad/grad_check.hpp"
#include "etad/ops.hpp"
#include "etad/sgs.hpp"

#include <cmath>
#include <map>

using namespace etad;

namespace {

// compact end-to-end setup shared by the stage tests
struct Lab {
  RunConfig cfg;
  Dataset data;

  explicit Lab(std::int64_t n = 32, std::int64_t c = 16, int videos = 2) {
    cfg.dataset.train_videos = videos;
    cfg.dataset.val_videos = 1;
    cfg.dataset.n_snippets = n;
    cfg.dataset.frames = 4;
    cfg.dataset.frame_dim = 6;
    cfg.dataset.min_actions = 1;
    cfg.dataset.max_actions = n >= 48 ? 2 : 1;  // keep packing feasible
    cfg.dataset.seed = 5;
    cfg.encoder.frame_dim = 6;
    cfg.encoder.frames = 4;
    cfg.encoder.conv_width = 8;
    cfg.encoder.hidden = 12;
    cfg.encoder.out_dim = c;
    cfg.detector.feature_dim = c;
    cfg.detector.sequence_length = n;
    cfg.detector.group_norm_groups = 4;
    cfg.detector.boundary_hidden = 8;
    cfg.detector.pem_fc_dims = {16, 8};
    cfg.sgs.epochs = 1;
    cfg.seed = 5;
    data = generate_dataset(cfg.dataset);
  }
};

std::map<std::string, ArrayX> grads_of(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  std::map<std::string, ArrayX> out;
  for (const auto& [name, p] : params)
    out[name] = p.has_grad() ? ArrayX(p.grad()) : ArrayX(ArrayX::Zero(p.size()));
  return out;
}

double max_rel_diff(const std::map<std::string, ArrayX>& a,
                    const std::map<std::string, ArrayX>& b) {
  double worst = 0.0;
  for (const auto& [name, ga] : a) {
    const ArrayX& gb = b.at(name);
    for (std::int64_t i = 0; i < ga.size(); ++i) {
      const double denom = std::max({1e-30, std::abs(ga[i]), std::abs(gb[i])});
      if (ga[i] != gb[i])
        worst = std::max(worst, std::abs(ga[i] - gb[i]) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_SUITE_BEGIN("sgs");

TEST_CASE("stage 1 equals parallel eval encoding bitwise for several K") {
  Lab lab;
  Trainer tr(lab.cfg, lab.data);
  const VideoSample& video = lab.data.train[0];
  Tensor par = parallel_encode(tr.graph(), tr.encoder(), video);
  for (int k : {1, 2, 4, int(video.n_snippets)}) {
    CAPTURE(k);
    Tensor seq = stage1_sequential_encode(tr.graph(), tr.encoder(), video, k);
    REQUIRE(seq.shape() == par.shape());
    for (std::int64_t i = 0; i < seq.size(); ++i)
      CHECK(seq.value_at(i) == par.value_at(i));
    CHECK(seq.is_leaf());
    CHECK(seq.requires_grad());
  }
  CHECK_THROWS_AS(
      stage1_sequential_encode(tr.graph(), tr.encoder(), video, 0),
      std::invalid_argument);
}

TEST_CASE("stage 1 retains zero bytes; stage-1 FLOPs equal the parallel count") {
  Lab lab;
  {
    Trainer tr(lab.cfg, lab.data);
    tr.graph().reset_flops();
    stage1_sequential_encode(tr.graph(), tr.encoder(), lab.data.train[0], 4);
    CHECK(tr.graph().memory_report().peak(kPhaseEncoderForward) == 0);
    CHECK(tr.graph().tape_size() == 0);

    const std::uint64_t seq_flops =
        tr.graph().read_flops().forward_in(kPhaseEncoderForward);
    Trainer tr2(lab.cfg, lab.data);
    tr2.graph().reset_flops();
    tr2.graph().begin_phase(kPhaseEncoderForward);
    parallel_encode(tr2.graph(), tr2.encoder(), lab.data.train[0]);
    CHECK(seq_flops ==
          tr2.graph().read_flops().forward_in(kPhaseEncoderForward));
  }
}

TEST_CASE("stage 2: gradient shape, scaling linearity, finite-difference") {
  Lab lab(16, 16);
  Trainer tr(lab.cfg, lab.data);
  const VideoSample& video = lab.data.train[0];
  std::vector<Segment> gt = video.gt_segments();

  Tensor f1 = stage1_sequential_encode(tr.graph(), tr.encoder(), video, 4);
  RngStream rng_a(9, "aps");
  Stage2Result r1 = stage2_detector_step(tr.graph(), tr.detector(), f1, gt,
                                         lab.cfg.aps, rng_a);
  CHECK(r1.feature_grads.rows() == video.n_snippets);
  CHECK(r1.feature_grads.cols() == lab.cfg.encoder.out_dim);

  // the detector tape is freed afterwards
  CHECK(tr.graph().tape_size() == 0);

  // finite differences of the loss w.r.t. the features on the same APS set
  // and the same (detached) per-stage proposal sets
  std::vector<ProposalSet> stage_sets;
  for (const StageOutput& so : r1.outputs.stages)
    stage_sets.push_back(so.proposals);
  ArrayX f_vals(f1.values());
  ScalarFn loss_fn = [&](Graph& g, const Tensor& x) {
    DetectorModel local = init_detector(g, lab.cfg.detector, lab.cfg.seed);
    auto [loss_t, bd] =
        compute_loss(local, detector_forward_fixed(local, x, stage_sets), gt);
    return loss_t;
  };
  auto fd = grad_check(loss_fn, {video.n_snippets, lab.cfg.encoder.out_dim},
                       f_vals, 1e-5);
  CHECK(fd.max_rel_error <= 1e-5);
}

TEST_CASE("gamma=1 SGS encoder gradients equal naive gradients (Eq. 4)") {
  Lab lab;
  std::map<std::string, ArrayX> naive_grads;
  std::map<std::string, ArrayX> naive_det_grads;
  double naive_loss = 0.0;
  {
    RunConfig cfg = lab.cfg;
    cfg.naive_e2e = true;
    Trainer tr(cfg, lab.data);
    RngStream aps(cfg.seed, "aps/shared");
    NaiveResult nr = naive_e2e_step(tr.graph(), tr.encoder(), tr.detector(),
                                    lab.data.train[0],
                                    lab.data.train[0].gt_segments(), cfg.aps,
                                    aps);
    naive_loss = nr.loss.total;
    naive_grads = grads_of(tr.encoder().named_parameters());
    naive_det_grads = grads_of(tr.detector().named_parameters());
  }

  for (int k : {1, 2, 4, 32}) {
    CAPTURE(k);
    RunConfig cfg = lab.cfg;
    cfg.sgs.gamma = 1.0;
    cfg.sgs.micro_batch = k;
    Trainer tr(cfg, lab.data);
    const VideoSample& video = lab.data.train[0];
    RngStream aps(cfg.seed, "aps/shared");
    Tensor feats = stage1_sequential_encode(tr.graph(), tr.encoder(), video, k);
    Stage2Result s2 = stage2_detector_step(tr.graph(), tr.detector(), feats,
                                           video.gt_segments(), cfg.aps, aps);
    // identical arithmetic: bitwise-equal loss and detector gradients
    CHECK(s2.loss.total == naive_loss);
    std::map<std::string, ArrayX> det_grads =
        grads_of(tr.detector().named_parameters());
    CHECK(max_rel_diff(det_grads, naive_det_grads) == 0.0);

    RngStream sgs_rng(cfg.seed, "sgs/shared");
    stage3_sampled_update(tr.graph(), tr.encoder(), video, s2.feature_grads,
                          cfg.sgs, sgs_rng);
    std::map<std::string, ArrayX> enc_grads =
        grads_of(tr.encoder().named_parameters());
    CHECK(max_rel_diff(enc_grads, naive_grads) <= 1e-9);
  }
}

TEST_CASE("gamma=0 leaves all encoder gradients exactly zero") {
  Lab lab;
  RunConfig cfg = lab.cfg;
  cfg.sgs.gamma = 0.0;
  Trainer tr(cfg, lab.data);
  const VideoSample& video = lab.data.train[0];
  RngStream aps(cfg.seed, "aps/a");
  Tensor feats = stage1_sequential_encode(tr.graph(), tr.encoder(), video, 4);
  Stage2Result s2 = stage2_detector_step(tr.graph(), tr.detector(), feats,
                                         video.gt_segments(), cfg.aps, aps);
  RngStream sgs_rng(cfg.seed, "sgs/a");
  stage3_sampled_update(tr.graph(), tr.encoder(), video, s2.feature_grads,
                        cfg.sgs, sgs_rng);
  for (const auto& [name, p] : tr.encoder().named_parameters())
    CHECK(!p.has_grad());
}

TEST_CASE("pinned-index stage 3 equals the sum of per-snippet oracles") {
  Lab lab(8, 16, 1);
  RunConfig cfg = lab.cfg;
  Trainer tr(cfg, lab.data);
  const VideoSample& video = lab.data.train[0];
  const std::int64_t n = video.n_snippets, c = cfg.encoder.out_dim;

  // synthetic feature gradients, fixed
  MatrixR df(n, c);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      df(i, j) = std::sin(double(3 + i * c + j));

  // grid sampling with gamma=0.5 picks snippets {0,2,4,6}
  cfg.sgs.gamma = 0.5;
  cfg.sgs.micro_batch = 3;  // deliberately not dividing k
  cfg.sgs.snippet_sampler = SamplerKind::kGrid;
  RngStream sgs_rng(cfg.seed, "sgs/grid");
  stage3_sampled_update(tr.graph(), tr.encoder(), video, df, cfg.sgs, sgs_rng);
  std::map<std::string, ArrayX> got = grads_of(tr.encoder().named_parameters());

  // oracle: backward one snippet at a time over exactly those indices
  Trainer oracle(lab.cfg, lab.data);
  for (std::int64_t idx : {0, 2, 4, 6}) {
    Graph& g = oracle.graph();
    g.set_mode(Graph::Mode::kTrain);
    const std::int64_t row = video.frames * video.frame_dim;
    Tensor x = g.leaf({1, video.frames, video.frame_dim},
                      ArrayX(video.snippets.segment(idx * row, row)));
    Tensor f = encode(oracle.encoder(), x);
    Tensor seed = g.leaf({1, c}, ArrayX(df.row(idx).transpose()));
    g.backward(f, seed);
    g.clear_tape();
  }
  std::map<std::string, ArrayX> expect =
      grads_of(oracle.encoder().named_parameters());
  CHECK(max_rel_diff(got, expect) <= 1e-9);
}

TEST_CASE("feature gradients scale linearly with the loss") {
  Lab lab(16, 16);
  Trainer tr(lab.cfg, lab.data);
  const VideoSample& video = lab.data.train[0];
  RngStream aps(3, "aps/lin");
  Tensor feats = stage1_sequential_encode(tr.graph(), tr.encoder(), video, 4);
  Stage2Result s2 = stage2_detector_step(tr.graph(), tr.detector(), feats,
                                         video.gt_segments(), lab.cfg.aps, aps);
  // doubling the seed doubles the leaf gradient exactly
  Tensor feats2 = stage1_sequential_encode(tr.graph(), tr.encoder(), video, 4);
  ProposalSet dense = enumerate_proposals(int(video.n_snippets));
  ProposalSet sampled;
  for (std::size_t i : s2.aps_indices) sampled.push_back(dense[i]);
  auto [loss_t, bd] =
      compute_loss(tr.detector(), detector_forward(tr.detector(), feats2, sampled),
                   video.gt_segments());
  Tensor scaled = scale(loss_t, 2.0);
  tr.graph().backward_scalar(scaled);
  const std::int64_t sz = feats2.size();
  for (std::int64_t i = 0; i < sz; ++i)
    CHECK(feats2.grad()[i] == 2.0 * s2.feature_grads.data()[i]);
}

TEST_CASE("memory: K/N encoder peak ratio and monotonicity in K") {
  Lab lab(64, 16, 1);
  auto encoder_update_peak = [&](int k) {
    RunConfig cfg = lab.cfg;
    cfg.sgs.gamma = 1.0;
    cfg.sgs.micro_batch = k;
    Trainer tr(cfg, lab.data);
    const VideoSample& video = lab.data.train[0];
    RngStream aps(cfg.seed, "aps/m");
    Tensor f = stage1_sequential_encode(tr.graph(), tr.encoder(), video, k);
    Stage2Result s2 = stage2_detector_step(tr.graph(), tr.detector(), f,
                                           video.gt_segments(), cfg.aps, aps);
    RngStream sgs_rng(cfg.seed, "sgs/m");
    stage3_sampled_update(tr.graph(), tr.encoder(), video, s2.feature_grads,
                          cfg.sgs, sgs_rng);
    return tr.graph().memory_report().peak(kPhaseEncoderUpdate);
  };
  auto naive_peak = [&]() {
    RunConfig cfg = lab.cfg;
    cfg.naive_e2e = true;
    Trainer tr(cfg, lab.data);
    const VideoSample& video = lab.data.train[0];
    RngStream aps(cfg.seed, "aps/m");
    naive_e2e_step(tr.graph(), tr.encoder(), tr.detector(), video,
                   video.gt_segments(), cfg.aps, aps);
    return tr.graph().memory_report().peak(kPhaseEncoderForward);
  };

  const std::size_t full = naive_peak();
  const std::size_t k4 = encoder_update_peak(4);
  const std::size_t k8 = encoder_update_peak(8);
  const std::size_t k64 = encoder_update_peak(64);
  CHECK(double(k4) <= (4.0 / 64.0) * double(full) * 1.10);
  CHECK(double(k8) / double(k4) == doctest::Approx(2.0).epsilon(0.05));
  CHECK(k4 <= k8);
  CHECK(k8 <= k64);
  CHECK(double(k64) <= double(full) * 1.10);
  CHECK(double(k64) >= double(full) * 0.90);
}

TEST_CASE("flop ledger reproduces the 1+2*gamma over 2 encoder ratio") {
  Lab lab(40, 16, 1);  // N=40 makes every listed gamma an integer k
  const VideoSample& video = lab.data.train[0];

  auto sgs_encoder_flops = [&](double gamma) {
    RunConfig cfg = lab.cfg;
    cfg.sgs.gamma = gamma;
    Trainer tr(cfg, lab.data);
    RngStream aps(cfg.seed, "aps/f");
    Tensor f = stage1_sequential_encode(tr.graph(), tr.encoder(), video, 4);
    Stage2Result s2 = stage2_detector_step(tr.graph(), tr.detector(), f,
                                           video.gt_segments(), cfg.aps, aps);
    RngStream sgs_rng(cfg.seed, "sgs/f");
    stage3_sampled_update(tr.graph(), tr.encoder(), video, s2.feature_grads,
                          cfg.sgs, sgs_rng);
    const FlopLedger& fl = tr.graph().read_flops();
    return fl.forward_in(kPhaseEncoderForward) +
           fl.forward_in(kPhaseEncoderUpdate) +
           fl.backward_in(kPhaseEncoderUpdate);
  };

  RunConfig ncfg = lab.cfg;
  ncfg.naive_e2e = true;
  Trainer naive(ncfg, lab.data);
  RngStream aps(ncfg.seed, "aps/f");
  naive_e2e_step(naive.graph(), naive.encoder(), naive.detector(), video,
                 video.gt_segments(), ncfg.aps, aps);
  const FlopLedger& nf = naive.graph().read_flops();
  const std::uint64_t naive_total = nf.forward_in(kPhaseEncoderForward) +
                                    nf.backward_in(kPhaseEncoderForward);

  const std::pair<double, std::uint64_t> table[] = {
      {1.0, 150}, {0.5, 100}, {0.4, 90}, {0.3, 80}, {0.2, 70}, {0.1, 60}};
  for (auto [gamma, percent] : table) {
    CAPTURE(gamma);
    const std::uint64_t sgs_total = sgs_encoder_flops(gamma);
    // exact integer identity: 100 * sgs == percent * naive
    CHECK(100 * sgs_total == percent * naive_total);
  }
}

TEST_CASE("optimizer: zero grads, first step, pure decay") {
  Graph g;
  Tensor p1 = g.parameter({1}, ArrayX::Constant(1, 2.0));
  Tensor p2 = g.parameter({1}, ArrayX::Constant(1, 3.0));
  AdamW opt({AdamW::Group{{{"a", p1}, {"b", p2}}, 0.1}}, 0.0);

  // zero gradients, zero decay: parameters unchanged
  opt.step();
  CHECK(p1.values()[0] == 2.0);
  CHECK(p2.values()[0] == 3.0);

  // single step with g=1: update is -lr/(1+eps) by the bias-corrected rule
  Graph g2;
  Tensor q = g2.parameter({1}, ArrayX::Zero(1));
  AdamW opt2({AdamW::Group{{{"q", q}}, 0.1}}, 0.0);
  q.grad_ref()[0] = 1.0;
  opt2.step();
  CHECK(q.values()[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK((!q.has_grad() || q.grad()[0] == 0.0));  // grads zeroed afterward

  // decoupled decay alone multiplies by (1 - lr*wd)
  Graph g3;
  Tensor r = g3.parameter({1}, ArrayX::Constant(1, 5.0));
  AdamW opt3({AdamW::Group{{{"r", r}}, 0.01}}, 0.5);
  opt3.step();
  CHECK(r.values()[0] == doctest::Approx(5.0 * (1.0 - 0.01 * 0.5)).epsilon(1e-14));

  // non-finite gradients abort with a diagnostic
  Graph g4;
  Tensor s = g4.parameter({1}, ArrayX::Zero(1));
  AdamW opt4({AdamW::Group{{{"s", s}}, 0.1}}, 0.0);
  s.grad_ref()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt4.step(), std::runtime_error);
}

TEST_CASE("short training run: finite, improving, deterministic") {
  Lab lab(32, 16, 4);
  RunConfig cfg = lab.cfg;
  cfg.sgs.epochs = 4;
  cfg.sgs.batch_videos = 2;
  cfg.sgs.gamma = 0.3;
  cfg.sgs.lr_encoder = 1e-3;
  cfg.aps.ratio = 0.2;
  cfg.train_eval_aps_ratio = 0.5;

  Trainer a(cfg, lab.data);
  TrainResult ra = a.run();
  REQUIRE(ra.history.size() == 4);
  for (const EpochMetrics& m : ra.history) {
    CHECK(std::isfinite(m.mean_loss.total));
    CHECK(std::isfinite(m.avg_map));
  }
  CHECK(ra.history.back().mean_loss.total < ra.history.front().mean_loss.total);

  Trainer b(cfg, lab.data);
  TrainResult rb = b.run();
  const std::string csv_a = metrics_csv(cfg, ra.history);
  const std::string csv_b = metrics_csv(cfg, rb.history);
  // identical seeds reproduce the metrics bitwise, wall_seconds excluded
  auto strip_wall = [](const std::string& csv) {
    std::string out;
    for (std::size_t pos = 0; pos < csv.size();) {
      std::size_t eol = csv.find('\n', pos);
      if (eol == std::string::npos) eol = csv.size();
      std::string line = csv.substr(pos, eol - pos);
      const std::size_t comma = line.rfind(',');
      out += line.substr(0, comma) + "\n";
      pos = eol + 1;
    }
    return out;
  };
  CHECK(strip_wall(csv_a) == strip_wall(csv_b));
}

TEST_SUITE_END();
