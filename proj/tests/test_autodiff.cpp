#include <doctest.h>

#include "etad/grad_check.hpp"
#include "etad/ops.hpp"
#include "etad/rng.hpp"
#include "etad/tensor.hpp"

#include <cmath>
#include <vector>

using namespace etad;

namespace {

ArrayX random_array(std::int64_t n, RngStream& rng, double lo = -2.0,
                    double hi = 2.0) {
  ArrayX a(n);
  for (std::int64_t i = 0; i < n; ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// independent triple-loop matrix product
MatrixR matmul_oracle(const ArrayX& a, std::int64_t m, std::int64_t k,
                      const ArrayX& b, std::int64_t n) {
  MatrixR c = MatrixR::Zero(m, n);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t l = 0; l < k; ++l)
        c(i, j) += a[i * k + l] * b[l * n + j];
  return c;
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("apply add/relu on literal values") {
  Graph g;
  Tensor a = g.leaf({2}, {1.0, 2.0});
  Tensor b = g.leaf({2}, {3.0, 4.0});
  Tensor s = apply(OpKind::kAdd, {a, b});
  CHECK(s.value_at(0) == 4.0);
  CHECK(s.value_at(1) == 6.0);

  Tensor x = g.leaf({3}, {-1.0, 0.0, 2.0});
  Tensor r = apply(OpKind::kRelu, {x});
  CHECK(r.value_at(0) == 0.0);
  CHECK(r.value_at(1) == 0.0);
  CHECK(r.value_at(2) == 2.0);
}

TEST_CASE("apply rejects shape mismatch and bad arity") {
  Graph g;
  Tensor a = g.leaf({2}, {1.0, 2.0});
  Tensor b = g.leaf({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(apply(OpKind::kAdd, {a}), std::invalid_argument);
  CHECK_THROWS_AS(op_kind_from_string("transmogrify"), std::invalid_argument);
  Tensor m1 = g.leaf({2, 2}, {1, 2, 3, 4});
  Tensor m2 = g.leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_AS(matmul(m1, m2), std::invalid_argument);
}

TEST_CASE("matmul matches triple-loop oracle") {
  RngStream rng(11, "matmul");
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t m = 1 + std::int64_t(rng.uniform_int(5));
    const std::int64_t k = 1 + std::int64_t(rng.uniform_int(5));
    const std::int64_t n = 1 + std::int64_t(rng.uniform_int(5));
    ArrayX av = random_array(m * k, rng), bv = random_array(k * n, rng);
    Graph g;
    Tensor c = matmul(g.leaf({m, k}, av), g.leaf({k, n}, bv));
    MatrixR expect = matmul_oracle(av, m, k, bv, n);
    for (std::int64_t i = 0; i < m * n; ++i)
      CHECK(c.value_at(i) == doctest::Approx(expect(i / n, i % n)).epsilon(1e-14));
  }
}

TEST_CASE("backward of x*x accumulates and is linear in the seed") {
  Graph g;
  Tensor x = g.leaf({1}, {3.0}, true);
  Tensor y = mul(x, x);
  g.backward(y, g.leaf({1}, {1.0}));
  CHECK(x.grad()[0] == 6.0);

  x.zero_grad();
  g.backward(y, g.leaf({1}, {2.0}));
  CHECK(x.grad()[0] == 12.0);

  // repeated calls accumulate
  g.backward(y, g.leaf({1}, {1.0}));
  CHECK(x.grad()[0] == 18.0);
}

TEST_CASE("backward rejects eval-mode roots and bad seed shapes") {
  Graph g(Graph::Mode::kEval);
  Tensor x = g.leaf({1}, {3.0}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(g.backward(y, g.leaf({1}, {1.0})), std::invalid_argument);

  Graph t;
  Tensor a = t.leaf({2}, {1.0, 2.0}, true);
  Tensor s = relu(a);
  CHECK_THROWS_AS(t.backward(s, t.leaf({1}, {1.0})), std::invalid_argument);
}

TEST_CASE("backward additivity: power-of-two seeds are bitwise") {
  RngStream rng(5, "additivity");
  ArrayX av = random_array(12, rng), bv = random_array(12, rng);
  auto run = [&](double s1, int calls) {
    Graph g;
    Tensor a = g.leaf({3, 4}, av, true);
    Tensor b = g.leaf({4, 3}, bv, true);
    Tensor y = matmul(relu(a), tanh(b));
    Tensor seed = g.leaf({3, 3}, ArrayX(ArrayX::Constant(9, s1)));
    for (int i = 0; i < calls; ++i) g.backward(y, seed);
    return std::make_pair(ArrayX(a.grad()), ArrayX(b.grad()));
  };
  auto [ga2, gb2] = run(1.0, 2);   // two calls, seed 1
  auto [ga1, gb1] = run(2.0, 1);   // one call, seed 2
  for (std::int64_t i = 0; i < ga1.size(); ++i) CHECK(ga1[i] == ga2[i]);
  for (std::int64_t i = 0; i < gb1.size(); ++i) CHECK(gb1[i] == gb2[i]);
}

TEST_CASE("grad_check: linear, sigmoid, relu kink policy") {
  // f(x) = sum(x): gradient exactly ones. With integer inputs and a
  // power-of-two step every finite difference is exact, so the error is 0.
  ScalarFn fsum = [](Graph& g, const Tensor& x) { return sum_all(x); };
  ArrayX ints(16);
  for (std::int64_t i = 0; i < 16; ++i) ints[i] = double(i - 8);
  auto r = grad_check(fsum, {16}, ints, 0.5);
  CHECK(r.max_rel_error == 0.0);
  CHECK(r.excluded.empty());

  RngStream rng(7, "gradcheck");
  ArrayX x0 = random_array(16, rng);
  r = grad_check(fsum, {16}, x0);
  CHECK(r.max_rel_error <= 1e-9);

  ScalarFn fsig = [](Graph& g, const Tensor& x) {
    return sum_all(sigmoid(x));
  };
  r = grad_check(fsig, {16}, x0);
  CHECK(r.max_rel_error <= 1e-6);

  // relu at an exact kink: coordinate excluded, not failed
  ArrayX xk(3);
  xk << -1.0, 0.0, 2.0;
  ScalarFn frelu = [](Graph& g, const Tensor& x) { return sum_all(relu(x)); };
  r = grad_check(frelu, {3}, xk);
  REQUIRE(r.excluded.size() == 1);
  CHECK(r.excluded[0] == 1);
  CHECK(r.max_rel_error <= 1e-9);

  // non-scalar function rejected
  ScalarFn fid = [](Graph& g, const Tensor& x) { return relu(x); };
  CHECK_THROWS_AS(grad_check(fid, {3}, xk), std::invalid_argument);
}

TEST_CASE("grad_check: two-layer perceptron against finite differences") {
  RngStream rng(21, "mlp");
  ArrayX w1 = random_array(6 * 4, rng), b1 = random_array(4, rng);
  ArrayX w2 = random_array(4 * 1, rng), b2 = random_array(1, rng);
  ScalarFn mlp = [&](Graph& g, const Tensor& x) {
    Tensor h = relu(add(matmul(x, g.leaf({6, 4}, w1)), g.leaf({4}, b1)));
    Tensor o = add(matmul(h, g.leaf({4, 1}, w2)), g.leaf({1}, b2));
    return sum_all(o);
  };
  ArrayX x0 = random_array(2 * 6, rng);
  auto r = grad_check(mlp, {2, 6}, x0);
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("every op passes finite-difference checks over many seeds") {
  struct Case {
    const char* name;
    ScalarFn fn;
    Shape shape;
    double lo, hi;
  };
  RngStream aux(3, "aux");
  ArrayX m2 = random_array(6 * 2, aux);
  ArrayX gamma0 = random_array(8, aux, 0.5, 1.5);
  ArrayX beta0 = random_array(8, aux);
  ArrayX target0 = random_array(12, aux);
  ArrayX wconv = random_array(4 * 3 * 3, aux, -0.5, 0.5);
  ArrayX bconv = random_array(4, aux);
  std::vector<double> positions{0.3, 1.7, 2.0, 3.9, 0.0};

  std::vector<Case> cases = {
      {"add", [](Graph& g, const Tensor& x) {
         return sum_all(mul(add(x, x), x));
       }, {3, 4}, -2, 2},
      {"mul", [](Graph& g, const Tensor& x) {
         return sum_all(mul(x, x));
       }, {12}, -2, 2},
      {"add_row_broadcast", [&](Graph& g, const Tensor& x) {
         Tensor row = g.leaf({4}, {0.5, -0.25, 1.0, 2.0});
         return sum_all(mul(add(x, row), x));
       }, {3, 4}, -2, 2},
      {"matmul", [&](Graph& g, const Tensor& x) {
         return sum_all(mul(matmul(x, g.leaf({6, 2}, m2)),
                            matmul(x, g.leaf({6, 2}, m2))));
       }, {2, 6}, -2, 2},
      {"matmul_rowstable", [&](Graph& g, const Tensor& x) {
         Tensor y = matmul_rowstable(x, g.leaf({6, 2}, m2));
         return sum_all(mul(y, y));
       }, {2, 6}, -2, 2},
      {"relu", [](Graph& g, const Tensor& x) {
         return sum_all(mul(relu(x), relu(x)));
       }, {12}, -2, 2},
      {"sigmoid", [](Graph& g, const Tensor& x) {
         return sum_all(sigmoid(x));
       }, {12}, -4, 4},
      {"tanh", [](Graph& g, const Tensor& x) {
         return sum_all(etad::tanh(x));
       }, {12}, -3, 3},
      {"log", [](Graph& g, const Tensor& x) {
         return sum_all(etad::log(x));
       }, {12}, 0.2, 3},
      {"sum_axis0", [](Graph& g, const Tensor& x) {
         Tensor s = sum_axis0(x);
         return sum_all(mul(s, s));
       }, {5, 3}, -2, 2},
      {"mean_axis1", [](Graph& g, const Tensor& x) {
         Tensor m = mean_axis1(x);
         return sum_all(mul(m, m));
       }, {2, 4, 3}, -2, 2},
      {"concat_slice", [](Graph& g, const Tensor& x) {
         Tensor top = slice_rows(x, 0, 2);
         Tensor bottom = slice_rows(x, 2, 2);
         Tensor back = concat_rows({bottom, top});
         return sum_all(mul(back, back));
       }, {4, 3}, -2, 2},
      {"reshape", [](Graph& g, const Tensor& x) {
         Tensor r = reshape(x, {2, 6});
         return sum_all(mul(r, r));
       }, {4, 3}, -2, 2},
      {"lerp_gather", [&](Graph& g, const Tensor& x) {
         Tensor o = lerp_gather(x, positions);
         return sum_all(mul(o, o));
       }, {4, 3}, -2, 2},
      {"group_norm", [&](Graph& g, const Tensor& x) {
         Tensor o = group_norm(x, g.leaf({8}, gamma0), g.leaf({8}, beta0), 4);
         return sum_all(mul(o, o));
       }, {5, 8}, -2, 2},
      {"smooth_l1", [&](Graph& g, const Tensor& x) {
         return sum_all(smooth_l1(x, g.leaf({12}, target0)));
       }, {12}, -3, 3},
      {"conv1d", [&](Graph& g, const Tensor& x) {
         Tensor o = conv1d(x, g.leaf({4, 3, 3}, wconv), g.leaf({4}, bconv));
         return sum_all(mul(o, o));
       }, {2, 5, 3}, -2, 2},
  };

  for (const auto& c : cases) {
    CAPTURE(c.name);
    double worst = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
      RngStream rng(static_cast<std::uint64_t>(seed), c.name);
      ArrayX x0 = random_array(numel(c.shape), rng, c.lo, c.hi);
      auto r = grad_check(c.fn, c.shape, x0);
      worst = std::max(worst, r.max_rel_error);
    }
    CHECK_MESSAGE(worst <= 1e-6, c.name << " worst rel err " << worst);
  }
}

TEST_CASE("gradients flow to parameters of matmul and conv1d") {
  RngStream rng(13, "params");
  Graph g;
  ArrayX xv = random_array(2 * 5 * 3, rng);
  Tensor x = g.leaf({2, 5, 3}, xv);
  Tensor w = g.parameter({4, 3, 3}, random_array(4 * 3 * 3, rng));
  Tensor b = g.parameter({4}, random_array(4, rng));
  Tensor y = sum_all(conv1d(x, w, b));
  g.backward_scalar(y);
  REQUIRE(w.has_grad());
  REQUIRE(b.has_grad());
  // bias gradient of a sum is the output element count per channel
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(b.grad()[i] == doctest::Approx(2 * 5).epsilon(1e-12));

  // finite-difference check on the conv weight
  ScalarFn fw = [&](Graph& gg, const Tensor& wt) {
    Tensor o = conv1d(gg.leaf({2, 5, 3}, xv), wt, gg.leaf({4}, b.values()));
    return sum_all(mul(o, o));
  };
  auto r = grad_check(fw, {4, 3, 3}, w.values());
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("eval-mode forward is bitwise identical to train-mode forward") {
  RngStream rng(17, "modes");
  ArrayX xv = random_array(4 * 6, rng);
  ArrayX wv = random_array(6 * 5, rng);
  auto run = [&](Graph::Mode mode) {
    Graph g(mode);
    Tensor x = g.leaf({4, 6}, xv);
    Tensor w = g.leaf({6, 5}, wv);
    Tensor y = etad::tanh(matmul(relu(x), w));
    return ArrayX(y.values());
  };
  ArrayX train = run(Graph::Mode::kTrain);
  ArrayX eval = run(Graph::Mode::kEval);
  for (std::int64_t i = 0; i < train.size(); ++i) CHECK(train[i] == eval[i]);
}

TEST_CASE("eval mode records no tape and retains no bytes") {
  Graph g(Graph::Mode::kEval);
  RngStream rng(19, "evalmem");
  Tensor x = g.leaf({4, 8}, random_array(32, rng));
  Tensor w = g.leaf({8, 8}, random_array(64, rng));
  Tensor y = sigmoid(matmul(x, w));
  (void)y;
  CHECK(g.tape_size() == 0);
  MemoryReport r = g.memory_report();
  CHECK(r.current_live_bytes == 0);
  CHECK(y.is_leaf());
}

TEST_CASE("memory accountant attributes retained input bytes") {
  // one train-mode linear layer: input 4x8 doubles retained by matmul
  Graph g;
  RngStream rng(23, "mem");
  Tensor x = g.leaf({4, 8}, random_array(32, rng));
  Tensor w = g.parameter({8, 16}, random_array(128, rng));
  Tensor b = g.parameter({16}, random_array(16, rng));
  Tensor y = add(matmul(x, w), b);
  (void)y;
  MemoryReport r = g.memory_report();
  CHECK(r.breakdown.at("matmul") == 4 * 8 * 8);
  CHECK(r.current_live_bytes == 4 * 8 * 8);  // parameters excluded
  CHECK(r.parameter_bytes == (128 + 16) * 8);

  g.clear_tape();
  CHECK(g.memory_report().current_live_bytes == 0);
}

TEST_CASE("per-phase peaks track the live maximum") {
  Graph g;
  RngStream rng(29, "phase");
  g.begin_phase("a");
  Tensor x = g.leaf({16, 4}, random_array(64, rng));
  Tensor y = relu(x);                     // retains x: 512 bytes
  MemoryReport r = g.snapshot_memory("b");
  CHECK(r.peak("a") == 512);
  CHECK(r.current_live_bytes == 512);
  g.clear_tape();
  g.begin_phase("c");
  Tensor z = relu(slice_rows(x, 0, 4));  // retains a 4x4 slice: 128 bytes
  (void)y;
  (void)z;
  r = g.memory_report();
  CHECK(r.peak("b") == 512);  // phase b opened while 512 bytes were live
  CHECK(r.peak("c") == 128);
  CHECK(r.current_live_bytes == 128);
  CHECK(r.peak("a") == 512);
}

TEST_CASE("flop ledger: forward counts and backward=forward convention") {
  Graph g;
  RngStream rng(31, "flops");
  g.begin_phase("fwd");
  Tensor a = g.leaf({3, 4}, random_array(12, rng), true);
  Tensor b = g.leaf({4, 5}, random_array(20, rng), true);
  Tensor y = sum_all(matmul(a, b));
  const std::uint64_t expect = 2 * 3 * 4 * 5 + 15;
  CHECK(g.read_flops().forward_in("fwd") == expect);
  CHECK(g.read_flops().backward_in("fwd") == 0);
  g.backward_scalar(y);
  CHECK(g.read_flops().backward_in("fwd") == expect);
}

TEST_SUITE_END();
