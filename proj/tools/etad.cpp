#include <CLI11.hpp>

#include "etad/config.hpp"
#include "etad/fpenv.hpp"
#include "etad/ops.hpp"
#include "etad/sgs.hpp"
#include "etad/synthdata.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace etad;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::optional<double> aps_ratio;
  std::optional<std::string> sampler;
  std::optional<int> micro_batch;
  bool naive_e2e = false;
  bool force = false;
  bool oracle = false;
  std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "run-config JSON file");
  cmd->add_option("--seed", f.seed, "override the run seed");
  cmd->add_option("--gamma", f.gamma, "override the gradient sampling ratio");
  cmd->add_option("--aps-ratio", f.aps_ratio, "override the APS ratio");
  cmd->add_option("--sampler", f.sampler,
                  "override both sampler strategies (random, grid, block, "
                  "fps, kdpp, iou_balanced, scale_balanced)");
  cmd->add_option("--micro-batch", f.micro_batch, "override micro-batch K");
  cmd->add_flag("--naive-e2e", f.naive_e2e,
                "train with the parallel end-to-end baseline");
  cmd->add_flag("--force", f.force, "overwrite existing outputs");
  cmd->add_flag("--oracle", f.oracle,
                "eval: score ground-truth segments as detections");
  cmd->add_option("--out", f.out_dir, "output directory");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config_path.empty()) cfg = run_config_from_json_file(f.config_path);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.dataset.seed = *f.seed;
  }
  if (f.gamma) cfg.sgs.gamma = *f.gamma;
  if (f.aps_ratio) cfg.aps.ratio = *f.aps_ratio;
  if (f.sampler) {
    cfg.aps.strategy = sampler_from_string(*f.sampler);
    cfg.sgs.snippet_sampler = cfg.aps.strategy;
  }
  if (f.micro_batch) cfg.sgs.micro_batch = *f.micro_batch;
  if (f.naive_e2e) cfg.naive_e2e = true;
  if (f.out_dir) cfg.out_dir = *f.out_dir;
  return cfg;
}

int check_config(const RunConfig& cfg) {
  std::vector<std::string> errors = validate_run_config(cfg);
  if (errors.empty()) return kExitOk;
  std::cerr << "config validation failed:\n";
  for (const std::string& e : errors) std::cerr << "  - " << e << "\n";
  return kExitValidation;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

Dataset load_or_fail(const RunConfig& cfg) {
  if (!fs::exists(fs::path(cfg.dataset_dir) / "index.json"))
    throw std::runtime_error("dataset not found in '" + cfg.dataset_dir +
                             "' (run gen-data first)");
  return load_dataset(cfg.dataset_dir);
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags);
  if (int rc = check_config(cfg); rc != kExitOk) return rc;
  const std::string dir = flags.out_dir ? *flags.out_dir : cfg.dataset_dir;
  if (fs::exists(fs::path(dir) / "index.json") && !flags.force) {
    std::cerr << "refusing to overwrite existing dataset in '" << dir
              << "' (use --force)\n";
    return kExitValidation;
  }
  Dataset ds = generate_dataset(cfg.dataset);
  save_dataset(ds, dir);
  std::size_t n_actions = 0;
  for (const auto& v : ds.train) n_actions += v.annotations.size();
  for (const auto& v : ds.val) n_actions += v.annotations.size();
  std::printf("wrote %zu train + %zu val videos (%zu actions) to %s\n",
              ds.train.size(), ds.val.size(), n_actions, dir.c_str());
  return kExitOk;
}

int cmd_train(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags);
  if (int rc = check_config(cfg); rc != kExitOk) return rc;
  Dataset ds = load_or_fail(cfg);

  Trainer trainer(cfg, ds);
  TrainResult result = trainer.run();

  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "metrics.csv").string(),
                  metrics_csv(cfg, result.history));
  save_checkpoint(trainer, (fs::path(cfg.out_dir) / "checkpoint.json").string());
  write_text_file((fs::path(cfg.out_dir) / "config.json").string(),
                  run_config_to_json_text(cfg));
  write_text_file(
      (fs::path(cfg.out_dir) / "memory.json").string(),
      memory_report_to_json_text(trainer.graph().memory_report()));
  write_text_file((fs::path(cfg.out_dir) / "flops.json").string(),
                  flop_ledger_to_json_text(trainer.graph().read_flops()));
  std::printf("final avg mAP %.4f; outputs in %s\n", result.final_avg_map,
              cfg.out_dir.c_str());
  return kExitOk;
}

int cmd_ablate_aps(const CommonFlags& flags, const std::string& ratios_text) {
  RunConfig base = resolve_config(flags);
  base.sgs.gamma = 0.0;  // frozen-encoder setup
  if (int rc = check_config(base); rc != kExitOk) return rc;
  Dataset ds = load_or_fail(base);

  std::vector<double> ratios = parse_list(ratios_text);
  std::sort(ratios.begin(), ratios.end());
  std::ostringstream csv;
  csv << "aps_ratio,avg_map,detector_forward_flops,detector_backward_flops,"
         "peak_bytes_detector\n";
  for (double r : ratios) {
    RunConfig cfg = base;
    cfg.aps.ratio = r;
    Trainer trainer(cfg, ds);
    TrainResult res = trainer.run();
    const FlopLedger& fl = trainer.graph().read_flops();
    MemoryReport mem = trainer.graph().memory_report();
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%" PRIu64 ",%" PRIu64 ",%zu\n",
                  r, res.final_avg_map, fl.forward_in(kPhaseDetector),
                  fl.backward_in(kPhaseDetector), mem.peak(kPhaseDetector));
    csv << buf;
    std::printf("aps ratio %.4g -> avg mAP %.4f\n", r, res.final_avg_map);
  }
  fs::create_directories(base.out_dir);
  write_text_file((fs::path(base.out_dir) / "ablate_aps.csv").string(),
                  csv.str());
  return kExitOk;
}

int cmd_ablate_sgs(const CommonFlags& flags, const std::string& gammas_text) {
  RunConfig base = resolve_config(flags);
  if (int rc = check_config(base); rc != kExitOk) return rc;
  Dataset ds = load_or_fail(base);

  // naive end-to-end reference run for the FLOP and time ratios
  RunConfig naive_cfg = base;
  naive_cfg.naive_e2e = true;
  Trainer naive(naive_cfg, ds);
  TrainResult naive_res = naive.run();
  const FlopLedger& nf = naive.graph().read_flops();
  const std::uint64_t naive_encoder_flops =
      nf.forward_in(kPhaseEncoderForward) + nf.backward_in(kPhaseEncoderForward);
  double naive_wall = 0.0;
  for (const auto& m : naive_res.history) naive_wall += m.wall_seconds;

  std::vector<double> gammas = parse_list(gammas_text);
  std::ostringstream csv;
  csv << "gamma,avg_map,encoder_flop_ratio_percent,time_ratio_percent,"
         "peak_bytes_encoder_update\n";
  for (double g : gammas) {
    RunConfig cfg = base;
    cfg.sgs.gamma = g;
    cfg.naive_e2e = false;
    Trainer trainer(cfg, ds);
    TrainResult res = trainer.run();
    const FlopLedger& fl = trainer.graph().read_flops();
    const std::uint64_t enc = fl.forward_in(kPhaseEncoderForward) +
                              fl.forward_in(kPhaseEncoderUpdate) +
                              fl.backward_in(kPhaseEncoderUpdate);
    const double flop_ratio = 100.0 * double(enc) / double(naive_encoder_flops);
    double wall = 0.0;
    for (const auto& m : res.history) wall += m.wall_seconds;
    MemoryReport mem = trainer.graph().memory_report();
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%zu\n", g,
                  res.final_avg_map, flop_ratio,
                  100.0 * wall / std::max(naive_wall, 1e-9),
                  mem.peak(kPhaseEncoderUpdate));
    csv << buf;
    std::printf("gamma %.2f -> avg mAP %.4f, encoder FLOPs %.2f%%\n", g,
                res.final_avg_map, flop_ratio);
  }
  fs::create_directories(base.out_dir);
  write_text_file((fs::path(base.out_dir) / "ablate_sgs.csv").string(),
                  csv.str());
  return kExitOk;
}

int cmd_bench_mem(const CommonFlags& flags, const std::string& ks_text) {
  RunConfig base = resolve_config(flags);
  if (int rc = check_config(base); rc != kExitOk) return rc;
  Dataset ds = load_or_fail(base);
  if (ds.train.empty()) throw std::runtime_error("bench-mem: empty dataset");
  const VideoSample& video = ds.train.front();
  const std::vector<Segment> gt = video.gt_segments();

  // naive reference: one end-to-end iteration
  RunConfig naive_cfg = base;
  naive_cfg.naive_e2e = true;
  Trainer naive(naive_cfg, ds);
  {
    RngStream rng(naive_cfg.seed, "bench/aps");
    naive_e2e_step(naive.graph(), naive.encoder(), naive.detector(), video, gt,
                   naive_cfg.aps, rng);
  }
  const std::size_t naive_peak =
      naive.graph().memory_report().peak(kPhaseEncoderForward);

  std::ostringstream csv;
  csv << "micro_batch,encoder_peak_bytes,naive_peak_bytes,ratio\n";
  for (double kd : parse_list(ks_text)) {
    const int k = static_cast<int>(kd);
    RunConfig cfg = base;
    cfg.sgs.micro_batch = k;
    cfg.sgs.gamma = 1.0;  // stage 3 touches every snippet
    Trainer trainer(cfg, ds);
    RngStream aps_rng(cfg.seed, "bench/aps");
    RngStream sgs_rng(cfg.seed, "bench/sgs");
    Tensor feats =
        stage1_sequential_encode(trainer.graph(), trainer.encoder(), video, k);
    Stage2Result s2 = stage2_detector_step(trainer.graph(), trainer.detector(),
                                           feats, gt, cfg.aps, aps_rng);
    stage3_sampled_update(trainer.graph(), trainer.encoder(), video,
                          s2.feature_grads, cfg.sgs, sgs_rng);
    const std::size_t peak =
        trainer.graph().memory_report().peak(kPhaseEncoderUpdate);
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%d,%zu,%zu,%.17g\n", k, peak, naive_peak,
                  double(peak) / double(naive_peak));
    csv << buf;
    std::printf("K=%d: encoder peak %zu bytes (naive %zu, ratio %.4f)\n", k,
                peak, naive_peak, double(peak) / double(naive_peak));
  }
  fs::create_directories(base.out_dir);
  write_text_file((fs::path(base.out_dir) / "bench_mem.csv").string(),
                  csv.str());
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint_path,
             const std::string& split) {
  RunConfig cfg = resolve_config(flags);
  Checkpoint ck;
  if (!checkpoint_path.empty()) {
    ck = load_checkpoint(checkpoint_path);
    cfg = ck.config;
    if (flags.out_dir) cfg.out_dir = *flags.out_dir;
  }
  if (int rc = check_config(cfg); rc != kExitOk) return rc;
  Dataset ds = load_or_fail(cfg);
  const std::vector<VideoSample>& videos = split == "train" ? ds.train : ds.val;

  EvalResult result;
  std::vector<Detection> detections;
  if (flags.oracle) {
    std::map<std::string, std::vector<Segment>> gt;
    for (const VideoSample& v : videos) {
      gt[v.video_id] = v.gt_segments();
      for (const Segment& s : gt[v.video_id]) {
        Detection d;
        d.video_id = v.video_id;
        d.start = s.start;
        d.end = s.end;
        d.p_start = d.p_end = d.p_iou = 1.0;
        d.score = 1.0;
        detections.push_back(d);
      }
    }
    result = compute_map(detections, gt, cfg.eval_thresholds);
  } else {
    Trainer trainer(cfg, ds);
    if (!checkpoint_path.empty()) restore_trainer(trainer, ck);
    std::map<std::string, std::vector<Segment>> gt;
    for (const VideoSample& v : videos) {
      std::vector<Detection> d = infer(trainer.graph(), trainer.encoder(),
                                       trainer.detector(), v, cfg.infer,
                                       cfg.sgs.micro_batch);
      detections.insert(detections.end(), d.begin(), d.end());
      gt[v.video_id] = v.gt_segments();
    }
    result = compute_map(detections, gt, cfg.eval_thresholds);
  }

  fs::create_directories(cfg.out_dir);
  write_text_file((fs::path(cfg.out_dir) / "eval.json").string(),
                  eval_result_to_json_text(result));
  write_text_file((fs::path(cfg.out_dir) / "detections.json").string(),
                  detections_to_json_text(detections));
  std::printf("avg mAP %.4f over %zu detections (%s split)\n",
              result.average_map, detections.size(), split.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  use_fast_fp_subnormals();
  if (const char* threads = std::getenv("ETAD_LAB_THREADS")) {
    // this build executes strictly sequentially; the cap is accepted and a
    // value of 1 is the only one that changes nothing
    if (std::strtol(threads, nullptr, 10) > 1)
      std::fprintf(stderr,
                   "note: ETAD_LAB_THREADS=%s requested, but this build runs "
                   "all work sequentially for bitwise reproducibility\n",
                   threads);
  }

  CLI::App app{"deterministic end-to-end temporal action detection lab"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, aps_flags, sgs_flags, mem_flags,
      eval_flags;
  std::string ratios = "0.001,0.002,0.02,0.06,0.2,1.0";
  std::string gammas = "1.0,0.5,0.4,0.3,0.2,0.1";
  std::string ks = "1,2,4,8,16";
  std::string checkpoint_path;
  std::string split = "val";

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_flags);

  CLI::App* train = app.add_subcommand("train", "run SGS training");
  add_common(train, train_flags);

  CLI::App* aps = app.add_subcommand(
      "ablate-aps", "frozen-encoder training across APS ratios");
  add_common(aps, aps_flags);
  aps->add_option("--ratios", ratios, "comma-separated APS ratios");

  CLI::App* sgs = app.add_subcommand(
      "ablate-sgs", "training across gradient sampling ratios");
  add_common(sgs, sgs_flags);
  sgs->add_option("--gammas", gammas, "comma-separated gamma values");

  CLI::App* mem = app.add_subcommand(
      "bench-mem", "encoder peak-memory ratios across micro-batch sizes");
  add_common(mem, mem_flags);
  mem->add_option("--micro-batches", ks, "comma-separated K values");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_flags);
  ev->add_option("--checkpoint", checkpoint_path, "checkpoint JSON");
  ev->add_option("--split", split, "dataset split (train|val)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags);
    if (train->parsed()) return cmd_train(train_flags);
    if (aps->parsed()) return cmd_ablate_aps(aps_flags, ratios);
    if (sgs->parsed()) return cmd_ablate_sgs(sgs_flags, gammas);
    if (mem->parsed()) return cmd_bench_mem(mem_flags, ks);
    if (ev->parsed()) return cmd_eval(eval_flags, checkpoint_path, split);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
