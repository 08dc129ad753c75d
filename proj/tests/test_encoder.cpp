#include <doctest.h>

#include "etad/encoder.hpp"
#include "etad/ops.hpp"
#include "etad/rng.hpp"

#include <cmath>
#include <vector>

using namespace etad;

namespace {

ArrayX random_array(std::int64_t n, RngStream& rng, double lo = -1.0,
                    double hi = 1.0) {
  ArrayX a(n);
  for (std::int64_t i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// straight-line reimplementation of conv->relu->conv->relu->pool->fc->relu->fc
std::vector<double> encode_oracle(const EncoderModel& m,
                                  const std::vector<double>& x, std::int64_t t,
                                  std::int64_t d) {
  const std::int64_t w = m.config.conv_width;
  auto conv = [&](const std::vector<double>& in, std::int64_t cin,
                  std::int64_t cout, const ArrayX& wt, const ArrayX& b) {
    std::vector<double> out(static_cast<std::size_t>(t * cout), 0.0);
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t o = 0; o < cout; ++o) {
        double acc = b[o];
        for (int j = 0; j < 3; ++j) {
          const std::int64_t src = ti + j - 1;
          if (src < 0 || src >= t) continue;
          for (std::int64_t i = 0; i < cin; ++i)
            acc += in[static_cast<std::size_t>(src * cin + i)] *
                   wt[(o * cin + i) * 3 + j];
        }
        out[static_cast<std::size_t>(ti * cout + o)] = acc;
      }
    return out;
  };
  auto relu_v = [](std::vector<double> v) {
    for (double& x : v) x = std::max(0.0, x);
    return v;
  };

  std::vector<double> h = relu_v(conv(x, d, w, m.conv1_w.values(), m.conv1_b.values()));
  h = relu_v(conv(h, w, w, m.conv2_w.values(), m.conv2_b.values()));
  std::vector<double> pooled(static_cast<std::size_t>(w), 0.0);
  for (std::int64_t ti = 0; ti < t; ++ti)
    for (std::int64_t i = 0; i < w; ++i)
      pooled[static_cast<std::size_t>(i)] +=
          h[static_cast<std::size_t>(ti * w + i)] / double(t);
  const std::int64_t hid = m.config.hidden;
  std::vector<double> f1(static_cast<std::size_t>(hid), 0.0);
  for (std::int64_t j = 0; j < hid; ++j) {
    double acc = m.fc1_b.values()[j];
    for (std::int64_t i = 0; i < w; ++i)
      acc += pooled[static_cast<std::size_t>(i)] * m.fc1_w.values()[i * hid + j];
    f1[static_cast<std::size_t>(j)] = std::max(0.0, acc);
  }
  const std::int64_t c = m.config.out_dim;
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t j = 0; j < c; ++j) {
    double acc = m.fc2_b.values()[j];
    for (std::int64_t i = 0; i < hid; ++i)
      acc += f1[static_cast<std::size_t>(i)] * m.fc2_w.values()[i * c + j];
    out[static_cast<std::size_t>(j)] = acc;
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("zero snippet with zero biases encodes to zero") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  cfg.frame_dim = 3;
  cfg.frames = 4;
  EncoderModel m = init_encoder(g, cfg, 5);
  Tensor x = g.zeros({1, cfg.frames, cfg.frame_dim});
  Tensor f = encode(m, x);
  REQUIRE(f.shape() == Shape{1, cfg.out_dim});
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(f.value_at(i) == 0.0);
}

TEST_CASE("init is reproducible and seeds differ") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  EncoderModel a = init_encoder(g, cfg, 42);
  EncoderModel b = init_encoder(g, cfg, 42);
  EncoderModel c = init_encoder(g, cfg, 43);
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
    const ArrayX& av = a.named_parameters()[i].second.values();
    const ArrayX& bv = b.named_parameters()[i].second.values();
    for (std::int64_t j = 0; j < av.size(); ++j) CHECK(av[j] == bv[j]);
  }
  bool any_diff = false;
  for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
    const ArrayX& av = a.named_parameters()[i].second.values();
    const ArrayX& cv = c.named_parameters()[i].second.values();
    for (std::int64_t j = 0; j < av.size(); ++j)
      if (av[j] != cv[j]) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("parameter count matches the closed-form layer count") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  cfg.frame_dim = 8;
  cfg.conv_width = 32;
  cfg.hidden = 64;
  cfg.out_dim = 64;
  EncoderModel m = init_encoder(g, cfg, 1);
  const std::int64_t expect = (32 * 8 * 3 + 32) + (32 * 32 * 3 + 32) +
                              (32 * 64 + 64) + (64 * 64 + 64);
  CHECK(m.parameter_count() == expect);
}

TEST_CASE("micro-batch independence: encode rows are partition-invariant") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  cfg.frame_dim = 5;
  cfg.frames = 4;
  EncoderModel m = init_encoder(g, cfg, 7);
  RngStream rng(3, "indep");
  const std::int64_t n = 6;
  ArrayX all = random_array(n * cfg.frames * cfg.frame_dim, rng);
  Tensor batch = g.leaf({n, cfg.frames, cfg.frame_dim}, all);
  Tensor f_all = encode(m, batch);

  const std::int64_t row = cfg.frames * cfg.frame_dim;
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor one = g.leaf({1, cfg.frames, cfg.frame_dim},
                        ArrayX(all.segment(i * row, row)));
    Tensor f_one = encode(m, one);
    for (std::int64_t j = 0; j < cfg.out_dim; ++j)
      CHECK(f_one.value_at(j) == f_all.value_at(i * cfg.out_dim + j));
  }
}

TEST_CASE("encode matches a plain-loop oracle within 1e-12") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  cfg.frame_dim = 3;
  cfg.frames = 4;
  cfg.conv_width = 6;
  cfg.hidden = 5;
  cfg.out_dim = 4;
  EncoderModel m = init_encoder(g, cfg, 11);
  RngStream rng(9, "oracle");
  ArrayX x = random_array(cfg.frames * cfg.frame_dim, rng);
  Tensor xt = g.leaf({1, cfg.frames, cfg.frame_dim}, x);
  Tensor f = encode(m, xt);

  std::vector<double> xv(x.data(), x.data() + x.size());
  std::vector<double> expect = encode_oracle(m, xv, cfg.frames, cfg.frame_dim);
  for (std::int64_t j = 0; j < cfg.out_dim; ++j)
    CHECK(std::abs(f.value_at(j) - expect[static_cast<std::size_t>(j)]) <=
          1e-12);
}

TEST_CASE("encode rejects mismatched frame geometry") {
  Graph g(Graph::Mode::kEval);
  EncoderConfig cfg;
  EncoderModel m = init_encoder(g, cfg, 2);
  Tensor bad = g.zeros({2, cfg.frames, cfg.frame_dim + 1});
  CHECK_THROWS_AS(encode(m, bad), std::invalid_argument);
}

TEST_SUITE_END();
