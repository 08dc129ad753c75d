#include "etad/config.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace etad {

using nlohmann::json;

namespace {

json to_json(const DatasetConfig& c) {
  return json{{"train_videos", c.train_videos},
              {"val_videos", c.val_videos},
              {"n_snippets", c.n_snippets},
              {"frames", c.frames},
              {"frame_dim", c.frame_dim},
              {"n_classes", c.n_classes},
              {"min_actions", c.min_actions},
              {"max_actions", c.max_actions},
              {"short_min", c.short_min},
              {"short_max", c.short_max},
              {"medium_min", c.medium_min},
              {"medium_max", c.medium_max},
              {"long_min", c.long_min},
              {"long_max", c.long_max},
              {"snr", c.snr},
              {"seed", c.seed}};
}

void from_json_into(const json& j, DatasetConfig& c) {
  j.at("train_videos").get_to(c.train_videos);
  j.at("val_videos").get_to(c.val_videos);
  j.at("n_snippets").get_to(c.n_snippets);
  j.at("frames").get_to(c.frames);
  j.at("frame_dim").get_to(c.frame_dim);
  j.at("n_classes").get_to(c.n_classes);
  j.at("min_actions").get_to(c.min_actions);
  j.at("max_actions").get_to(c.max_actions);
  j.at("short_min").get_to(c.short_min);
  j.at("short_max").get_to(c.short_max);
  j.at("medium_min").get_to(c.medium_min);
  j.at("medium_max").get_to(c.medium_max);
  j.at("long_min").get_to(c.long_min);
  j.at("long_max").get_to(c.long_max);
  j.at("snr").get_to(c.snr);
  j.at("seed").get_to(c.seed);
}

json to_json(const EncoderConfig& c) {
  return json{{"frame_dim", c.frame_dim},
              {"frames", c.frames},
              {"conv_width", c.conv_width},
              {"hidden", c.hidden},
              {"out_dim", c.out_dim}};
}

void from_json_into(const json& j, EncoderConfig& c) {
  j.at("frame_dim").get_to(c.frame_dim);
  j.at("frames").get_to(c.frames);
  j.at("conv_width").get_to(c.conv_width);
  j.at("hidden").get_to(c.hidden);
  j.at("out_dim").get_to(c.out_dim);
}

json to_json(const DetectorConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"sequence_length", c.sequence_length},
              {"group_norm_groups", c.group_norm_groups},
              {"boundary_hidden", c.boundary_hidden},
              {"pem_fc_dims", c.pem_fc_dims},
              {"stage_iou_thresholds", c.stage_iou_thresholds},
              {"roi_extension", c.roi_extension},
              {"roi_boundary", c.roi_boundary},
              {"roi_extended_bins", c.roi_extended_bins},
              {"roi_boundary_bins", c.roi_boundary_bins},
              {"iou_pos_threshold", c.iou_pos_threshold},
              {"iou_neg_threshold", c.iou_neg_threshold},
              {"boundary_label_halfwidth", c.boundary_label_halfwidth},
              {"loss_lambda", c.loss_lambda},
              {"enhance_cell", c.enhance_cell}};
}

void from_json_into(const json& j, DetectorConfig& c) {
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("sequence_length").get_to(c.sequence_length);
  j.at("group_norm_groups").get_to(c.group_norm_groups);
  j.at("boundary_hidden").get_to(c.boundary_hidden);
  j.at("pem_fc_dims").get_to(c.pem_fc_dims);
  j.at("stage_iou_thresholds").get_to(c.stage_iou_thresholds);
  j.at("roi_extension").get_to(c.roi_extension);
  j.at("roi_boundary").get_to(c.roi_boundary);
  j.at("roi_extended_bins").get_to(c.roi_extended_bins);
  j.at("roi_boundary_bins").get_to(c.roi_boundary_bins);
  j.at("iou_pos_threshold").get_to(c.iou_pos_threshold);
  j.at("iou_neg_threshold").get_to(c.iou_neg_threshold);
  j.at("boundary_label_halfwidth").get_to(c.boundary_label_halfwidth);
  j.at("loss_lambda").get_to(c.loss_lambda);
  j.at("enhance_cell").get_to(c.enhance_cell);
}

json to_json(const SgsConfig& c) {
  return json{{"micro_batch", c.micro_batch},
              {"gamma", c.gamma},
              {"snippet_sampler", to_string(c.snippet_sampler)},
              {"lr_detector", c.lr_detector},
              {"lr_encoder", c.lr_encoder},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"lr_decay_after", c.lr_decay_after},
              {"lr_decay", c.lr_decay},
              {"batch_videos", c.batch_videos},
              {"rescale_sampled_grads", c.rescale_sampled_grads},
              {"freeze_params", c.freeze_params}};
}

void from_json_into(const json& j, SgsConfig& c) {
  j.at("micro_batch").get_to(c.micro_batch);
  j.at("gamma").get_to(c.gamma);
  c.snippet_sampler = sampler_from_string(j.at("snippet_sampler"));
  j.at("lr_detector").get_to(c.lr_detector);
  j.at("lr_encoder").get_to(c.lr_encoder);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("epochs").get_to(c.epochs);
  j.at("lr_decay_after").get_to(c.lr_decay_after);
  j.at("lr_decay").get_to(c.lr_decay);
  j.at("batch_videos").get_to(c.batch_videos);
  j.at("rescale_sampled_grads").get_to(c.rescale_sampled_grads);
  j.at("freeze_params").get_to(c.freeze_params);
}

json to_json(const ApsConfig& c) {
  return json{{"ratio", c.ratio}, {"strategy", to_string(c.strategy)}};
}

void from_json_into(const json& j, ApsConfig& c) {
  j.at("ratio").get_to(c.ratio);
  c.strategy = sampler_from_string(j.at("strategy"));
}

json to_json(const InferConfig& c) {
  return json{{"use_enumeration", c.use_enumeration},
              {"aps_ratio", c.aps_ratio},
              {"nms_sigma", c.nms.sigma},
              {"nms_score_floor", c.nms.score_floor},
              {"nms_top_k", c.nms.top_k}};
}

void from_json_into(const json& j, InferConfig& c) {
  j.at("use_enumeration").get_to(c.use_enumeration);
  j.at("aps_ratio").get_to(c.aps_ratio);
  j.at("nms_sigma").get_to(c.nms.sigma);
  j.at("nms_score_floor").get_to(c.nms.score_floor);
  j.at("nms_top_k").get_to(c.nms.top_k);
}

json to_json(const RunConfig& c) {
  return json{{"dataset", to_json(c.dataset)},
              {"encoder", to_json(c.encoder)},
              {"detector", to_json(c.detector)},
              {"sgs", to_json(c.sgs)},
              {"aps", to_json(c.aps)},
              {"infer", to_json(c.infer)},
              {"train_eval_aps_ratio", c.train_eval_aps_ratio},
              {"train_eval_use_enumeration", c.train_eval_use_enumeration},
              {"eval_thresholds", c.eval_thresholds},
              {"dataset_dir", c.dataset_dir},
              {"out_dir", c.out_dir},
              {"seed", c.seed},
              {"naive_e2e", c.naive_e2e}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  from_json_into(j.at("dataset"), c.dataset);
  from_json_into(j.at("encoder"), c.encoder);
  from_json_into(j.at("detector"), c.detector);
  from_json_into(j.at("sgs"), c.sgs);
  from_json_into(j.at("aps"), c.aps);
  from_json_into(j.at("infer"), c.infer);
  j.at("train_eval_aps_ratio").get_to(c.train_eval_aps_ratio);
  j.at("train_eval_use_enumeration").get_to(c.train_eval_use_enumeration);
  j.at("eval_thresholds").get_to(c.eval_thresholds);
  j.at("dataset_dir").get_to(c.dataset_dir);
  j.at("out_dir").get_to(c.out_dir);
  j.at("seed").get_to(c.seed);
  j.at("naive_e2e").get_to(c.naive_e2e);
  return c;
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  return run_config_from_json(json::parse(text));
}

RunConfig run_config_from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  return run_config_from_json(json::parse(f));
}

std::string run_config_to_json_text(const RunConfig& config) {
  return to_json(config).dump(2) + "\n";
}

std::vector<std::string> validate_run_config(const RunConfig& c) {
  std::vector<std::string> errors;
  auto bad = [&](const std::string& msg) { errors.push_back(msg); };

  if (c.dataset.n_snippets < 2) bad("dataset.n_snippets must be >= 2");
  if (c.dataset.frames < 1) bad("dataset.frames must be >= 1");
  if (c.dataset.frame_dim < 1) bad("dataset.frame_dim must be >= 1");
  if (c.dataset.n_classes < 1) bad("dataset.n_classes must be >= 1");
  if (c.dataset.train_videos < 0 || c.dataset.val_videos < 0)
    bad("dataset video counts must be >= 0");
  if (c.dataset.min_actions < 0) bad("dataset.min_actions must be >= 0");
  if (c.dataset.max_actions < c.dataset.min_actions)
    bad("dataset.max_actions must be >= dataset.min_actions");
  if (c.dataset.snr < 0.0) bad("dataset.snr must be >= 0");
  for (auto [lo, hi, name] :
       {std::tuple{c.dataset.short_min, c.dataset.short_max, "short"},
        std::tuple{c.dataset.medium_min, c.dataset.medium_max, "medium"},
        std::tuple{c.dataset.long_min, c.dataset.long_max, "long"}})
    if (!(lo > 0.0 && hi >= lo && hi < 1.0))
      bad(std::string("dataset duration bucket '") + name +
          "' must satisfy 0 < min <= max < 1");

  if (c.encoder.frame_dim != c.dataset.frame_dim)
    bad("encoder.frame_dim must equal dataset.frame_dim");
  if (c.encoder.frames != c.dataset.frames)
    bad("encoder.frames must equal dataset.frames");
  if (c.encoder.conv_width < 1 || c.encoder.hidden < 1 || c.encoder.out_dim < 1)
    bad("encoder widths must be positive");

  if (c.detector.feature_dim != c.encoder.out_dim)
    bad("detector.feature_dim must equal encoder.out_dim");
  if (c.detector.sequence_length < 2)
    bad("detector.sequence_length must be >= 2");
  if (c.detector.group_norm_groups < 1 ||
      c.detector.feature_dim % c.detector.group_norm_groups != 0)
    bad("detector.feature_dim must be divisible by group_norm_groups");
  if (c.detector.stages() < 1)
    bad("detector.stage_iou_thresholds must not be empty");
  for (double t : c.detector.stage_iou_thresholds)
    if (!(t > 0.0 && t <= 1.0))
      bad("detector stage iou thresholds must lie in (0,1]");
  if (c.detector.roi_boundary_bins < 2 || c.detector.roi_extended_bins < 2)
    bad("detector roi bin counts must be >= 2");
  if (!(c.detector.iou_neg_threshold <= c.detector.iou_pos_threshold))
    bad("detector.iou_neg_threshold must be <= iou_pos_threshold");
  if (c.detector.pem_fc_dims.empty())
    bad("detector.pem_fc_dims must not be empty");

  if (c.sgs.micro_batch < 1) bad("sgs.micro_batch must be >= 1");
  if (c.sgs.micro_batch > c.dataset.n_snippets)
    bad("sgs.micro_batch must be <= dataset.n_snippets");
  if (!(c.sgs.gamma >= 0.0 && c.sgs.gamma <= 1.0))
    bad("sgs.gamma must lie in [0,1]");
  if (c.sgs.epochs < 0) bad("sgs.epochs must be >= 0");
  if (c.sgs.batch_videos < 1) bad("sgs.batch_videos must be >= 1");
  if (c.sgs.lr_detector < 0.0 || c.sgs.lr_encoder < 0.0)
    bad("learning rates must be >= 0");
  if (c.sgs.weight_decay < 0.0) bad("sgs.weight_decay must be >= 0");

  if (!(c.aps.ratio > 0.0 && c.aps.ratio <= 1.0))
    bad("aps.ratio must lie in (0,1]");
  if (!(c.train_eval_aps_ratio > 0.0 && c.train_eval_aps_ratio <= 1.0))
    bad("train_eval_aps_ratio must lie in (0,1]");
  if (!(c.infer.aps_ratio > 0.0 && c.infer.aps_ratio <= 1.0))
    bad("infer.aps_ratio must lie in (0,1]");
  if (c.infer.nms.sigma <= 0.0) bad("infer.nms_sigma must be > 0");
  if (c.infer.nms.top_k < 1) bad("infer.nms_top_k must be >= 1");

  if (c.eval_thresholds.empty()) bad("eval_thresholds must not be empty");
  for (double t : c.eval_thresholds)
    if (!(t > 0.0 && t < 1.0)) bad("eval thresholds must lie in (0,1)");
  if (c.out_dir.empty()) bad("out_dir must not be empty");
  if (c.dataset_dir.empty()) bad("dataset_dir must not be empty");
  return errors;
}

namespace {

json array_from(const ArrayX& a) {
  json out = json::array();
  for (std::int64_t i = 0; i < a.size(); ++i) out.push_back(a[i]);
  return out;
}

ArrayX array_to(const json& j) {
  ArrayX a(static_cast<std::int64_t>(j.size()));
  for (std::int64_t i = 0; i < a.size(); ++i)
    a[i] = j.at(static_cast<std::size_t>(i)).get<double>();
  return a;
}

}  // namespace

void save_checkpoint(const Trainer& trainer, const std::string& path) {
  json j;
  j["seed"] = trainer.config().seed;
  j["config"] = json::parse(run_config_to_json_text(trainer.config()));
  json params;
  auto dump = [&](const std::vector<std::pair<std::string, Tensor>>& named) {
    for (const auto& [name, p] : named) {
      json entry;
      entry["shape"] = p.shape();
      entry["data"] = array_from(p.values());
      params[name] = std::move(entry);
    }
  };
  dump(trainer.encoder().named_parameters());
  dump(trainer.detector().named_parameters());
  j["params"] = std::move(params);

  const AdamW& opt = const_cast<Trainer&>(trainer).optimizer();
  json opt_state;
  for (const auto& [name, st] : opt.state())
    opt_state[name] = json{{"m", array_from(st.m)}, {"v", array_from(st.v)}};
  j["optimizer"] = json{{"step", opt.step_count()}, {"state", opt_state}};

  write_text_file(path, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  json j = json::parse(read_text_file(path));
  Checkpoint ck;
  ck.seed = j.at("seed");
  ck.config = run_config_from_json_text(j.at("config").dump());
  for (const auto& [name, entry] : j.at("params").items()) {
    Shape shape = entry.at("shape").get<Shape>();
    ck.params[name] = {shape, array_to(entry.at("data"))};
  }
  ck.optimizer_step = j.at("optimizer").at("step");
  for (const auto& [name, st] : j.at("optimizer").at("state").items())
    ck.optimizer_state[name] =
        AdamW::ParamState{array_to(st.at("m")), array_to(st.at("v"))};
  return ck;
}

void restore_trainer(Trainer& trainer, const Checkpoint& checkpoint) {
  auto restore = [&](const std::vector<std::pair<std::string, Tensor>>& named) {
    for (const auto& [name, p] : named) {
      auto it = checkpoint.params.find(name);
      if (it == checkpoint.params.end())
        throw std::runtime_error("checkpoint missing parameter " + name);
      if (it->second.first != p.shape())
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      p.values() = it->second.second;
    }
  };
  restore(trainer.encoder().named_parameters());
  restore(trainer.detector().named_parameters());
  trainer.optimizer().restore(
      checkpoint.optimizer_step,
      std::map<std::string, AdamW::ParamState>(checkpoint.optimizer_state));
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const RunConfig& config,
                        const std::vector<EpochMetrics>& history) {
  std::ostringstream os;
  const int stages = config.detector.stages();
  os << "epoch,l_bd_s";
  for (int s = 1; s <= stages; ++s) os << ",l_bd_p" << s;
  for (int s = 1; s <= stages; ++s) os << ",l_iou" << s;
  for (int s = 1; s <= stages; ++s) os << ",l_secw" << s;
  os << ",loss_total,avg_map";
  for (double t : config.eval_thresholds) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.2f", t);
    os << ",ap_" << buf;
  }
  os << ",peak_bytes_encoder_forward,peak_bytes_detector,"
        "peak_bytes_encoder_update,forward_flops_encoder,"
        "backward_flops_encoder,forward_flops_detector,"
        "backward_flops_detector,wall_seconds\n";

  for (const EpochMetrics& m : history) {
    os << m.epoch << "," << fmt_double(m.mean_loss.l_bd_s);
    for (int s = 0; s < stages; ++s)
      os << "," << fmt_double(s < int(m.mean_loss.l_bd_p.size())
                                  ? m.mean_loss.l_bd_p[std::size_t(s)] : 0.0);
    for (int s = 0; s < stages; ++s)
      os << "," << fmt_double(s < int(m.mean_loss.l_iou.size())
                                  ? m.mean_loss.l_iou[std::size_t(s)] : 0.0);
    for (int s = 0; s < stages; ++s)
      os << "," << fmt_double(s < int(m.mean_loss.l_secw.size())
                                  ? m.mean_loss.l_secw[std::size_t(s)] : 0.0);
    os << "," << fmt_double(m.mean_loss.total) << ","
       << fmt_double(m.avg_map);
    for (double ap : m.per_threshold_ap) os << "," << fmt_double(ap);
    os << "," << m.peak_bytes_encoder_forward << "," << m.peak_bytes_detector
       << "," << m.peak_bytes_encoder_update << "," << m.forward_flops_encoder
       << "," << m.backward_flops_encoder << "," << m.forward_flops_detector
       << "," << m.backward_flops_detector << ","
       << fmt_double(m.wall_seconds) << "\n";
  }
  return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::string eval_result_to_json_text(const EvalResult& result) {
  json j{{"thresholds", result.thresholds},
         {"ap", result.ap},
         {"average_map", result.average_map}};
  return j.dump(2) + "\n";
}

std::string detections_to_json_text(const std::vector<Detection>& detections) {
  json arr = json::array();
  for (const Detection& d : detections)
    arr.push_back(json{{"video_id", d.video_id},
                       {"start", d.start},
                       {"end", d.end},
                       {"score", d.score},
                       {"p_start", d.p_start},
                       {"p_end", d.p_end},
                       {"p_iou", d.p_iou}});
  return arr.dump(2) + "\n";
}

std::string memory_report_to_json_text(const MemoryReport& report) {
  json j{{"current_live_bytes", report.current_live_bytes},
         {"peak_live_bytes", report.peak_live_bytes},
         {"breakdown", report.breakdown},
         {"parameter_bytes", report.parameter_bytes}};
  return j.dump(2) + "\n";
}

std::string flop_ledger_to_json_text(const FlopLedger& ledger) {
  json j{{"forward", ledger.forward}, {"backward", ledger.backward}};
  return j.dump(2) + "\n";
}

}  // namespace etad
