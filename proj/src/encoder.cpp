#include "etad/encoder.hpp"

#include "etad/ops.hpp"
#include "etad/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace etad {

namespace {

ArrayX uniform_init(RngStream& rng, std::int64_t n, std::int64_t fan_in) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  ArrayX a(n);
  for (std::int64_t i = 0; i < n; ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> EncoderModel::named_parameters()
    const {
  return {{"encoder.conv1_w", conv1_w}, {"encoder.conv1_b", conv1_b},
          {"encoder.conv2_w", conv2_w}, {"encoder.conv2_b", conv2_b},
          {"encoder.fc1_w", fc1_w},     {"encoder.fc1_b", fc1_b},
          {"encoder.fc2_w", fc2_w},     {"encoder.fc2_b", fc2_b}};
}

std::int64_t EncoderModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : named_parameters()) n += t.size();
  return n;
}

EncoderModel init_encoder(Graph& graph, const EncoderConfig& config,
                          std::uint64_t seed) {
  if (config.frame_dim < 1 || config.frames < 1 || config.conv_width < 1 ||
      config.hidden < 1 || config.out_dim < 1)
    throw std::invalid_argument("init_encoder: all widths must be positive");

  RngStream rng(seed, "encoder_init");
  const std::int64_t d = config.frame_dim, w = config.conv_width,
                     h = config.hidden, c = config.out_dim;
  EncoderModel m;
  m.config = config;
  m.conv1_w = graph.parameter({w, d, 3}, uniform_init(rng, w * d * 3, d * 3));
  m.conv1_b = graph.parameter({w}, ArrayX::Zero(w));
  m.conv2_w = graph.parameter({w, w, 3}, uniform_init(rng, w * w * 3, w * 3));
  m.conv2_b = graph.parameter({w}, ArrayX::Zero(w));
  m.fc1_w = graph.parameter({w, h}, uniform_init(rng, w * h, w));
  m.fc1_b = graph.parameter({h}, ArrayX::Zero(h));
  m.fc2_w = graph.parameter({h, c}, uniform_init(rng, h * c, h));
  m.fc2_b = graph.parameter({c}, ArrayX::Zero(c));
  return m;
}

Tensor encode(const EncoderModel& model, const Tensor& snippets) {
  if (snippets.rank() != 3)
    throw std::invalid_argument("encode: snippet batch must be 3-D, got " +
                                shape_str(snippets.shape()));
  if (snippets.dim(1) != model.config.frames ||
      snippets.dim(2) != model.config.frame_dim)
    throw std::invalid_argument(
        "encode: snippet batch " + shape_str(snippets.shape()) +
        " does not match model (T_f=" + std::to_string(model.config.frames) +
        ", D=" + std::to_string(model.config.frame_dim) + ")");

  // the row-stable matmul keeps every snippet's feature bits independent of
  // the micro-batch partition
  Tensor h = relu(conv1d(snippets, model.conv1_w, model.conv1_b));
  h = relu(conv1d(h, model.conv2_w, model.conv2_b));
  Tensor pooled = mean_axis1(h);  // (K, W)
  Tensor f = relu(add(matmul_rowstable(pooled, model.fc1_w), model.fc1_b));
  return add(matmul_rowstable(f, model.fc2_w), model.fc2_b);
}

}  // namespace etad
