#pragma once

#include "etad/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace etad {

struct EncoderConfig {
  std::int64_t frame_dim = 8;     // D, flat dims per frame
  std::int64_t frames = 4;        // T_f, frames per snippet
  std::int64_t conv_width = 32;
  std::int64_t hidden = 64;
  std::int64_t out_dim = 64;      // C
};

// Toy snippet encoder: conv1d(D->W,k3) relu, conv1d(W->W,k3) relu, mean over
// frames, affine(W->H) relu, affine(H->C). No batch-coupling anywhere, so
// per-snippet features are independent of the micro-batch partition.
struct EncoderModel {
  EncoderConfig config;
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::int64_t parameter_count() const;
};

// Parameters drawn uniform in +-sqrt(1/fan_in), biases zero; reproducible
// from seed.
EncoderModel init_encoder(Graph& graph, const EncoderConfig& config,
                          std::uint64_t seed);

// snippets: (K, T_f, D) -> features (K, C). Train/eval follows graph mode.
Tensor encode(const EncoderModel& model, const Tensor& snippets);

}  // namespace etad
