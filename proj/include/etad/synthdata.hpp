#pragma once

#include "etad/tadeval.hpp"
#include "etad/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace etad {

struct Annotation {
  double start = 0.0;  // snippet units
  double end = 0.0;
  int label = 0;
};

struct VideoSample {
  std::string video_id;
  std::int64_t n_snippets = 0;  // N
  std::int64_t frames = 0;      // T_f
  std::int64_t frame_dim = 0;   // D
  ArrayX snippets;              // N * T_f * D, row-major
  std::vector<Annotation> annotations;

  std::vector<Segment> gt_segments() const;
};

struct DatasetConfig {
  int train_videos = 16;
  int val_videos = 8;
  std::int64_t n_snippets = 128;
  std::int64_t frames = 4;
  std::int64_t frame_dim = 8;
  int n_classes = 3;
  int min_actions = 1;
  int max_actions = 3;
  // duration buckets as fractions of N: short, medium, long
  double short_min = 0.04, short_max = 0.08;
  double medium_min = 0.10, medium_max = 0.20;
  double long_min = 0.22, long_max = 0.38;
  double snr = 2.0;  // class-pattern amplitude over noise sigma; <=0 => no noise
  std::uint64_t seed = 1;
};

// Synthetic untrimmed videos. Background snippets are white noise in a
// latent space; action snippets add a unit class pattern; every frame is
// observed through a fixed random orthogonal mixing followed by tanh, so
// class structure is only linearly separable after undoing the mixing.
struct Dataset {
  DatasetConfig config;
  std::vector<VideoSample> train;
  std::vector<VideoSample> val;
  MatrixR mixing;                 // D x D orthogonal
  MatrixR class_patterns;         // n_classes x D unit rows
};

Dataset generate_dataset(const DatasetConfig& config);

// inverse of the generator's observation map; exact when snr is infinite
int recover_snippet_class(const Dataset& dataset, const VideoSample& video,
                          std::int64_t snippet_index);

// linear time interpolation of an (N',C) sequence to exactly target rows,
// endpoints preserved
MatrixR rescale_sequence(const MatrixR& features, std::int64_t target);

// Windows at stride offsets; a final zero-padded window is added when the
// full windows do not reach the end of the video. Annotations are clipped to
// the window and dropped when the clipped part covers less than keep_fraction
// of the original.
std::vector<VideoSample> sliding_windows(const VideoSample& video,
                                         std::int64_t window = 128,
                                         std::int64_t stride = 64,
                                         double keep_fraction = 0.5);

// dataset directory layout: index.json + one little-endian f64 binary per
// video (header: N, T_f, D as u64)
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace etad
