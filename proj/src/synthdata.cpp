#include "etad/synthdata.hpp"

#include "etad/rng.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace etad {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Segment> VideoSample::gt_segments() const {
  std::vector<Segment> out;
  out.reserve(annotations.size());
  for (const Annotation& a : annotations) out.push_back({a.start, a.end});
  return out;
}

namespace {

MatrixR random_orthogonal(std::int64_t d, RngStream& rng) {
  MatrixR a(d, d);
  for (std::int64_t i = 0; i < d; ++i)
    for (std::int64_t j = 0; j < d; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<MatrixR> qr(a);
  MatrixR q = qr.householderQ() * MatrixR::Identity(d, d);
  return q;
}

MatrixR random_unit_rows(std::int64_t rows, std::int64_t d, RngStream& rng) {
  MatrixR m(rows, d);
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::int64_t j = 0; j < d; ++j) m(i, j) = rng.normal();
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

std::vector<Annotation> place_actions(const DatasetConfig& cfg,
                                      RngStream& rng) {
  const std::int64_t n = cfg.n_snippets;
  const int m = cfg.min_actions +
                static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(cfg.max_actions - cfg.min_actions + 1)));
  std::vector<std::int64_t> durations;
  for (int i = 0; i < m; ++i) {
    const int bucket = static_cast<int>(rng.uniform_int(3));
    double lo = cfg.short_min, hi = cfg.short_max;
    if (bucket == 1) {
      lo = cfg.medium_min;
      hi = cfg.medium_max;
    } else if (bucket == 2) {
      lo = cfg.long_min;
      hi = cfg.long_max;
    }
    const std::int64_t dur = std::max<std::int64_t>(
        2, static_cast<std::int64_t>(std::llround(rng.uniform(lo, hi) * double(n))));
    durations.push_back(dur);
  }

  constexpr std::int64_t kMinGap = 4;
  std::int64_t used = kMinGap * (m - 1);
  for (std::int64_t d : durations) used += d;
  if (used > n)
    throw std::invalid_argument(
        "generate_dataset: infeasible segment packing, " + std::to_string(m) +
        " actions of total length " + std::to_string(used - kMinGap * (m - 1)) +
        " (+gaps) exceed " + std::to_string(n) + " snippets");

  // distribute the slack over the m+1 gaps one unit at a time
  std::vector<std::int64_t> gaps(static_cast<std::size_t>(m) + 1, 0);
  for (std::size_t i = 1; i + 1 < gaps.size(); ++i) gaps[i] = kMinGap;
  std::int64_t extra = n - used;
  while (extra > 0) {
    gaps[static_cast<std::size_t>(rng.uniform_int(gaps.size()))] += 1;
    --extra;
  }

  std::vector<Annotation> out;
  std::int64_t cursor = gaps[0];
  for (int i = 0; i < m; ++i) {
    Annotation a;
    a.start = double(cursor);
    a.end = double(cursor + durations[static_cast<std::size_t>(i)]);
    a.label = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.n_classes)));
    out.push_back(a);
    cursor += durations[static_cast<std::size_t>(i)] +
              gaps[static_cast<std::size_t>(i) + 1];
  }
  return out;
}

VideoSample make_video(const DatasetConfig& cfg, const MatrixR& mixing,
                       const MatrixR& patterns, const std::string& id,
                       std::uint64_t seed, const std::string& stream) {
  RngStream rng(seed, stream);
  VideoSample v;
  v.video_id = id;
  v.n_snippets = cfg.n_snippets;
  v.frames = cfg.frames;
  v.frame_dim = cfg.frame_dim;
  v.annotations = place_actions(cfg, rng);

  const std::int64_t n = cfg.n_snippets, tf = cfg.frames, d = cfg.frame_dim;
  const double sigma = cfg.snr > 0.0 ? 1.0 / cfg.snr : 0.0;

  std::vector<int> snippet_class(static_cast<std::size_t>(n), -1);
  for (const Annotation& a : v.annotations)
    for (std::int64_t t = static_cast<std::int64_t>(a.start);
         t < static_cast<std::int64_t>(a.end); ++t)
      snippet_class[static_cast<std::size_t>(t)] = a.label;

  v.snippets = ArrayX::Zero(n * tf * d);
  Eigen::VectorXd z(d);
  for (std::int64_t t = 0; t < n; ++t) {
    for (std::int64_t f = 0; f < tf; ++f) {
      for (std::int64_t j = 0; j < d; ++j) z[j] = sigma * rng.normal();
      const int cls = snippet_class[static_cast<std::size_t>(t)];
      if (cls >= 0) z += patterns.row(cls).transpose();
      Eigen::VectorXd obs = (mixing * z).array().tanh();
      for (std::int64_t j = 0; j < d; ++j)
        v.snippets[(t * tf + f) * d + j] = obs[j];
    }
  }
  return v;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& config) {
  if (config.n_snippets < 2 || config.frames < 1 || config.frame_dim < 1 ||
      config.n_classes < 1 || config.train_videos < 0 ||
      config.val_videos < 0 || config.min_actions < 0 ||
      config.max_actions < config.min_actions)
    throw std::invalid_argument("generate_dataset: invalid config");

  Dataset ds;
  ds.config = config;
  RngStream mix_rng(config.seed, "mixing");
  ds.mixing = random_orthogonal(config.frame_dim, mix_rng);
  RngStream cls_rng(config.seed, "classes");
  ds.class_patterns =
      random_unit_rows(config.n_classes, config.frame_dim, cls_rng);

  for (int i = 0; i < config.train_videos; ++i)
    ds.train.push_back(make_video(config, ds.mixing, ds.class_patterns,
                                  "train_" + std::to_string(i), config.seed,
                                  "train_video_" + std::to_string(i)));
  for (int i = 0; i < config.val_videos; ++i)
    ds.val.push_back(make_video(config, ds.mixing, ds.class_patterns,
                                "val_" + std::to_string(i), config.seed,
                                "val_video_" + std::to_string(i)));
  return ds;
}

int recover_snippet_class(const Dataset& dataset, const VideoSample& video,
                          std::int64_t snippet_index) {
  const std::int64_t tf = video.frames, d = video.frame_dim;
  Eigen::VectorXd z_mean = Eigen::VectorXd::Zero(d);
  for (std::int64_t f = 0; f < tf; ++f) {
    Eigen::VectorXd x(d);
    for (std::int64_t j = 0; j < d; ++j) {
      double v = video.snippets[(snippet_index * tf + f) * d + j];
      v = std::clamp(v, -1.0 + 1e-15, 1.0 - 1e-15);
      x[j] = std::atanh(v);
    }
    z_mean += dataset.mixing.transpose() * x;
  }
  z_mean /= double(tf);

  int best = -1;
  double best_dot = 0.5;  // background unless a pattern clearly matches
  for (Eigen::Index c = 0; c < dataset.class_patterns.rows(); ++c) {
    const double dot = dataset.class_patterns.row(c).dot(z_mean);
    if (dot > best_dot) {
      best_dot = dot;
      best = static_cast<int>(c);
    }
  }
  return best;
}

MatrixR rescale_sequence(const MatrixR& features, std::int64_t target) {
  const std::int64_t n = features.rows();
  if (n < 2)
    throw std::invalid_argument("rescale_sequence: need at least 2 rows");
  if (target < 2)
    throw std::invalid_argument("rescale_sequence: target too small");
  MatrixR out(target, features.cols());
  for (std::int64_t i = 0; i < target; ++i) {
    const double pos = double(i) * double(n - 1) / double(target - 1);
    const std::int64_t lo = static_cast<std::int64_t>(std::floor(pos));
    const std::int64_t hi = std::min(lo + 1, n - 1);
    const double w = pos - double(lo);
    out.row(i) = (1.0 - w) * features.row(lo) + w * features.row(hi);
  }
  return out;
}

std::vector<VideoSample> sliding_windows(const VideoSample& video,
                                         std::int64_t window,
                                         std::int64_t stride,
                                         double keep_fraction) {
  std::vector<std::int64_t> offsets;
  for (std::int64_t o = 0; o + window <= video.n_snippets; o += stride)
    offsets.push_back(o);
  if (offsets.empty())
    offsets.push_back(0);  // shorter than one window: single padded window
  else if (offsets.back() + window < video.n_snippets)
    offsets.push_back(offsets.back() + stride);

  const std::int64_t tf = video.frames, d = video.frame_dim;
  std::vector<VideoSample> out;
  for (std::size_t wi = 0; wi < offsets.size(); ++wi) {
    const std::int64_t o = offsets[wi];
    VideoSample w;
    w.video_id = video.video_id + "_w" + std::to_string(wi);
    w.n_snippets = window;
    w.frames = tf;
    w.frame_dim = d;
    w.snippets = ArrayX::Zero(window * tf * d);
    const std::int64_t copy_n = std::min(window, video.n_snippets - o);
    for (std::int64_t t = 0; t < copy_n; ++t)
      for (std::int64_t j = 0; j < tf * d; ++j)
        w.snippets[t * tf * d + j] = video.snippets[(o + t) * tf * d + j];

    for (const Annotation& a : video.annotations) {
      const double cs = std::max(a.start, double(o));
      const double ce = std::min(a.end, double(o + window));
      const double clipped = ce - cs;
      if (clipped <= 0.0) continue;
      if (clipped / (a.end - a.start) < keep_fraction) continue;
      w.annotations.push_back({cs - double(o), ce - double(o), a.label});
    }
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

json config_to_json(const DatasetConfig& c) {
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

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.train_videos = j.at("train_videos");
  c.val_videos = j.at("val_videos");
  c.n_snippets = j.at("n_snippets");
  c.frames = j.at("frames");
  c.frame_dim = j.at("frame_dim");
  c.n_classes = j.at("n_classes");
  c.min_actions = j.at("min_actions");
  c.max_actions = j.at("max_actions");
  c.short_min = j.at("short_min");
  c.short_max = j.at("short_max");
  c.medium_min = j.at("medium_min");
  c.medium_max = j.at("medium_max");
  c.long_min = j.at("long_min");
  c.long_max = j.at("long_max");
  c.snr = j.at("snr");
  c.seed = j.at("seed");
  return c;
}

void write_video(const fs::path& path, const VideoSample& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const std::uint64_t header[3] = {static_cast<std::uint64_t>(v.n_snippets),
                                   static_cast<std::uint64_t>(v.frames),
                                   static_cast<std::uint64_t>(v.frame_dim)};
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  f.write(reinterpret_cast<const char*>(v.snippets.data()),
          static_cast<std::streamsize>(v.snippets.size() * sizeof(double)));
}

VideoSample read_video(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t header[3];
  f.read(reinterpret_cast<char*>(header), sizeof(header));
  VideoSample v;
  v.n_snippets = static_cast<std::int64_t>(header[0]);
  v.frames = static_cast<std::int64_t>(header[1]);
  v.frame_dim = static_cast<std::int64_t>(header[2]);
  v.snippets = ArrayX::Zero(v.n_snippets * v.frames * v.frame_dim);
  f.read(reinterpret_cast<char*>(v.snippets.data()),
         static_cast<std::streamsize>(v.snippets.size() * sizeof(double)));
  if (!f) throw std::runtime_error("truncated video file " + path.string());
  return v;
}

json video_entry(const VideoSample& v, const std::string& file,
                 const std::string& split) {
  json anns = json::array();
  for (const Annotation& a : v.annotations)
    anns.push_back(json::array({a.start, a.end, a.label}));
  return json{{"id", v.video_id},
              {"file", file},
              {"split", split},
              {"annotations", anns}};
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(dir);
  json index;
  index["config"] = config_to_json(dataset.config);
  json mixing = json::array();
  for (Eigen::Index i = 0; i < dataset.mixing.size(); ++i)
    mixing.push_back(dataset.mixing.data()[i]);
  index["mixing"] = mixing;
  json patterns = json::array();
  for (Eigen::Index i = 0; i < dataset.class_patterns.size(); ++i)
    patterns.push_back(dataset.class_patterns.data()[i]);
  index["class_patterns"] = patterns;

  index["videos"] = json::array();
  auto dump_split = [&](const std::vector<VideoSample>& vids,
                        const std::string& split) {
    for (const VideoSample& v : vids) {
      const std::string file = v.video_id + ".bin";
      write_video(fs::path(dir) / file, v);
      index["videos"].push_back(video_entry(v, file, split));
    }
  };
  dump_split(dataset.train, "train");
  dump_split(dataset.val, "val");

  std::ofstream f(fs::path(dir) / "index.json");
  f << index.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "index.json");
  if (!f)
    throw std::runtime_error("load_dataset: missing index.json in " + dir);
  json index = json::parse(f);

  Dataset ds;
  ds.config = config_from_json(index.at("config"));
  const std::int64_t d = ds.config.frame_dim;
  ds.mixing = MatrixR(d, d);
  const auto& mx = index.at("mixing");
  for (Eigen::Index i = 0; i < ds.mixing.size(); ++i)
    ds.mixing.data()[i] = mx.at(static_cast<std::size_t>(i)).get<double>();
  ds.class_patterns = MatrixR(ds.config.n_classes, d);
  const auto& cp = index.at("class_patterns");
  for (Eigen::Index i = 0; i < ds.class_patterns.size(); ++i)
    ds.class_patterns.data()[i] =
        cp.at(static_cast<std::size_t>(i)).get<double>();

  for (const auto& entry : index.at("videos")) {
    VideoSample v = read_video(fs::path(dir) / entry.at("file").get<std::string>());
    v.video_id = entry.at("id");
    for (const auto& a : entry.at("annotations"))
      v.annotations.push_back(
          {a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<int>()});
    if (entry.at("split") == "train")
      ds.train.push_back(std::move(v));
    else
      ds.val.push_back(std::move(v));
  }
  return ds;
}

}  // namespace etad
