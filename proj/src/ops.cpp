#include "etad/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace etad {

namespace {

Graph* common_graph(std::initializer_list<const Tensor*> ts,
                    const char* op_name) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (!t->valid())
      throw std::invalid_argument(std::string(op_name) + ": invalid tensor");
    if (!g) g = t->graph();
    if (t->graph() != g)
      throw std::invalid_argument(std::string(op_name) +
                                  ": inputs belong to different graphs");
  }
  return g;
}

[[noreturn]] void shape_error(const char* op_name, const Tensor& a,
                              const Tensor& b) {
  throw std::invalid_argument(std::string(op_name) + ": shape mismatch " +
                              shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

ArrayX mat_to_array(const MatrixR& m) {
  return Eigen::Map<const ArrayX>(m.data(), m.size());
}

// evaluate a row-major matrix expression directly into flat storage
template <class Expr>
ArrayX eval_mat(std::int64_t rows, std::int64_t cols, const Expr& e) {
  ArrayX out(rows * cols);
  MatMap(out.data(), rows, cols) = e;
  return out;
}

ConstMatMap as_mat(const ArrayX& flat, std::int64_t rows, std::int64_t cols) {
  return ConstMatMap(flat.data(), rows, cols);
}

Tensor unary_op(const char* name, const Tensor& x, ArrayX out_values,
                std::uint64_t flops, std::vector<Tensor> saved,
                BackwardFn backward) {
  Graph* g = x.graph();
  Tensor out = g->make_result(x.shape(), std::move(out_values));
  g->count_forward_flops(flops);
  if (g->training())
    g->record(name, {x}, out, flops, std::move(saved), std::move(backward));
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Graph* g = common_graph({&a, &b}, "add");
  const std::uint64_t flops = static_cast<std::uint64_t>(a.size());

  if (a.shape() == b.shape()) {
    Tensor out = g->make_result(a.shape(), a.values() + b.values());
    g->count_forward_flops(flops);
    if (g->training())
      g->record("add", {a, b}, out, flops, {},
                [ad = a.data_ptr(), bd = b.data_ptr()](ArrayX& go,
                                                       const GradSink& sink) {
                  sink(ad, go);
                  sink(bd, std::move(go));
                });
    return out;
  }

  if (b.size() == 1) {  // x + scalar
    Tensor out = g->make_result(a.shape(), a.values() + b.value_at(0));
    g->count_forward_flops(flops);
    if (g->training())
      g->record("add", {a, b}, out, flops, {},
                [ad = a.data_ptr(), bd = b.data_ptr()](ArrayX& go,
                                                       const GradSink& sink) {
                  ArrayX gb(1);
                  gb[0] = go.sum();
                  sink(ad, std::move(go));
                  sink(bd, std::move(gb));
                });
    return out;
  }

  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {  // row bias
    const std::int64_t m = a.dim(0), n = a.dim(1);
    ArrayX res_flat(m * n);
    MatMap res(res_flat.data(), m, n);
    res = as_mat(a.values(), m, n);
    res.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), n);
    Tensor out = g->make_result(a.shape(), std::move(res_flat));
    g->count_forward_flops(flops);
    if (g->training())
      g->record("add", {a, b}, out, flops, {},
                [ad = a.data_ptr(), bd = b.data_ptr(), m,
                 n](ArrayX& go, const GradSink& sink) {
                  ArrayX gb = eval_mat(1, n, as_mat(go, m, n).colwise().sum());
                  sink(ad, std::move(go));
                  sink(bd, std::move(gb));
                });
    return out;
  }

  shape_error("add", a, b);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Graph* g = common_graph({&a, &b}, "mul");
  const std::uint64_t flops = static_cast<std::uint64_t>(a.size());

  if (a.shape() == b.shape()) {
    Tensor out = g->make_result(a.shape(), a.values() * b.values());
    g->count_forward_flops(flops);
    if (g->training())
      g->record("mul", {a, b}, out, flops, {a, b},
                [a, b](ArrayX& go, const GradSink& sink) {
                  sink(a.data_ptr(), ArrayX(go * b.values()));
                  sink(b.data_ptr(), ArrayX(go * a.values()));
                });
    return out;
  }

  if (b.size() == 1) {  // x * scalar
    Tensor out = g->make_result(a.shape(), a.values() * b.value_at(0));
    g->count_forward_flops(flops);
    if (g->training())
      g->record("mul", {a, b}, out, flops, {a, b},
                [a, b](ArrayX& go, const GradSink& sink) {
                  sink(a.data_ptr(), ArrayX(go * b.value_at(0)));
                  ArrayX gb(1);
                  gb[0] = (go * a.values()).sum();
                  sink(b.data_ptr(), gb);
                });
    return out;
  }

  shape_error("mul", a, b);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Graph* g = common_graph({&a, &b}, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a, b);
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);

  Tensor out = g->make_result(
      {m, n}, eval_mat(m, n, as_mat(a.values(), m, k) * as_mat(b.values(), k, n)));
  const std::uint64_t flops = 2ULL * m * k * n;
  g->count_forward_flops(flops);
  if (g->training())
    g->record("matmul", {a, b}, out, flops, {a, b},
              [a, b, m, k, n](ArrayX& go, const GradSink& sink) {
                auto gom = as_mat(go, m, n);
                sink(a.data_ptr(),
                     eval_mat(m, k, gom * as_mat(b.values(), k, n).transpose()));
                sink(b.data_ptr(),
                     eval_mat(k, n, as_mat(a.values(), m, k).transpose() * gom));
              });
  return out;
}

Tensor matmul_rowstable(const Tensor& a, const Tensor& b) {
  Graph* g = common_graph({&a, &b}, "matmul_rowstable");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul_rowstable", a, b);
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);

  auto am = as_mat(a.values(), m, k);
  auto bm = as_mat(b.values(), k, n);
  ArrayX res_flat(m * n);
  MatMap res(res_flat.data(), m, n);
  for (std::int64_t i = 0; i < m; ++i) {
    // fixed accumulation order along k for every row
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(n);
    for (std::int64_t kk = 0; kk < k; ++kk) acc += am(i, kk) * bm.row(kk);
    res.row(i) = acc;
  }
  Tensor out = g->make_result({m, n}, std::move(res_flat));
  const std::uint64_t flops = 2ULL * m * k * n;
  g->count_forward_flops(flops);
  if (g->training())
    g->record("matmul_rowstable", {a, b}, out, flops, {a, b},
              [a, b, m, k, n](ArrayX& go, const GradSink& sink) {
                auto gom = as_mat(go, m, n);
                sink(a.data_ptr(),
                     eval_mat(m, k, gom * as_mat(b.values(), k, n).transpose()));
                sink(b.data_ptr(),
                     eval_mat(k, n, as_mat(a.values(), m, k).transpose() * gom));
              });
  return out;
}

Tensor relu(const Tensor& x) {
  return unary_op("relu", x, x.values().max(0.0),
                  static_cast<std::uint64_t>(x.size()), {x},
                  [x](ArrayX& go, const GradSink& sink) {
                    // subgradient 0 at the kink
                    ArrayX gx = (x.values() > 0.0).select(go, 0.0);
                    sink(x.data_ptr(), gx);
                  });
}

Tensor sigmoid(const Tensor& x) {
  ArrayX y = 1.0 / (1.0 + (-x.values()).exp());
  Graph* g = x.graph();
  Tensor out = g->make_result(x.shape(), std::move(y));
  const std::uint64_t flops = static_cast<std::uint64_t>(x.size());
  g->count_forward_flops(flops);
  if (g->training())
    g->record("sigmoid", {x}, out, flops, {out},
              [xd = x.data_ptr(), out](ArrayX& go, const GradSink& sink) {
                const ArrayX& y = out.values();
                sink(xd, ArrayX(go * y * (1.0 - y)));
              });
  return out;
}

Tensor tanh(const Tensor& x) {
  ArrayX y = x.values().tanh();
  Graph* g = x.graph();
  Tensor out = g->make_result(x.shape(), std::move(y));
  const std::uint64_t flops = static_cast<std::uint64_t>(x.size());
  g->count_forward_flops(flops);
  if (g->training())
    g->record("tanh", {x}, out, flops, {out},
              [xd = x.data_ptr(), out](ArrayX& go, const GradSink& sink) {
                const ArrayX& y = out.values();
                sink(xd, ArrayX(go * (1.0 - y * y)));
              });
  return out;
}

Tensor log(const Tensor& x) {
  return unary_op("log", x, x.values().log(),
                  static_cast<std::uint64_t>(x.size()), {x},
                  [x](ArrayX& go, const GradSink& sink) {
                    sink(x.data_ptr(), ArrayX(go / x.values()));
                  });
}

Tensor sum_all(const Tensor& x) {
  Graph* g = x.graph();
  ArrayX v(1);
  v[0] = x.values().sum();
  Tensor out = g->make_result({1}, std::move(v));
  const std::uint64_t flops = static_cast<std::uint64_t>(x.size());
  g->count_forward_flops(flops);
  if (g->training())
    g->record("sum_all", {x}, out, flops, {},
              [xd = x.data_ptr(), n = x.size()](ArrayX& go,
                                                const GradSink& sink) {
                sink(xd, ArrayX(ArrayX::Constant(n, go[0])));
              });
  return out;
}

Tensor sum_axis0(const Tensor& x) {
  Graph* g = x.graph();
  if (x.rank() != 2)
    throw std::invalid_argument("sum_axis0: expected 2-D, got " +
                                shape_str(x.shape()));
  const std::int64_t m = x.dim(0), n = x.dim(1);
  Tensor out = g->make_result(
      {n}, eval_mat(1, n, as_mat(x.values(), m, n).colwise().sum()));
  const std::uint64_t flops = static_cast<std::uint64_t>(x.size());
  g->count_forward_flops(flops);
  if (g->training())
    g->record("sum_axis0", {x}, out, flops, {},
              [xd = x.data_ptr(), m, n](ArrayX& go,
                                        const GradSink& sink) {
                ArrayX gx(m * n);
                MatMap(gx.data(), m, n).rowwise() =
                    Eigen::Map<const Eigen::RowVectorXd>(go.data(), n);
                sink(xd, std::move(gx));
              });
  return out;
}

Tensor mean_axis1(const Tensor& x) {
  Graph* g = x.graph();
  if (x.rank() != 3)
    throw std::invalid_argument("mean_axis1: expected 3-D, got " +
                                shape_str(x.shape()));
  const std::int64_t k = x.dim(0), t = x.dim(1), c = x.dim(2);
  ArrayX res_flat(k * c);
  MatMap res(res_flat.data(), k, c);
  auto xm = as_mat(x.values(), k * t, c);
  for (std::int64_t i = 0; i < k; ++i)
    res.row(i) = xm.middleRows(i * t, t).colwise().sum() / double(t);
  Tensor out = g->make_result({k, c}, std::move(res_flat));
  const std::uint64_t flops = static_cast<std::uint64_t>(k * t * c + k * c);
  g->count_forward_flops(flops);
  if (g->training())
    g->record("mean_axis1", {x}, out, flops, {},
              [xd = x.data_ptr(), k, t, c](ArrayX& go,
                                           const GradSink& sink) {
                ArrayX gx_flat(k * t * c);
                MatMap gx(gx_flat.data(), k * t, c);
                auto gm = as_mat(go, k, c);
                for (std::int64_t i = 0; i < k; ++i)
                  gx.middleRows(i * t, t).rowwise() = gm.row(i) / double(t);
                sink(xd, std::move(gx_flat));
              });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_rows: empty input list");
  Graph* g = parts[0].graph();
  std::int64_t rows = 0;
  const std::int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  for (const Tensor& p : parts) {
    common_graph({&parts[0], &p}, "concat_rows");
    if (p.rank() != 2 || p.dim(1) != cols)
      shape_error("concat_rows", parts[0], p);
    rows += p.dim(0);
  }
  ArrayX res_flat(rows * cols);
  MatMap res(res_flat.data(), rows, cols);
  std::int64_t r = 0;
  for (const Tensor& p : parts) {
    res.middleRows(r, p.dim(0)) = as_mat(p.values(), p.dim(0), cols);
    r += p.dim(0);
  }
  Tensor out = g->make_result({rows, cols}, std::move(res_flat));
  if (g->training())
    g->record("concat_rows", parts, out, 0, {},
              [parts, cols](ArrayX& go, const GradSink& sink) {
                std::int64_t r = 0;
                for (const Tensor& p : parts) {
                  sink(p.data_ptr(),
                       eval_mat(p.dim(0), cols,
                                ConstMatMap(go.data(), go.size() / cols, cols)
                                    .middleRows(r, p.dim(0))));
                  r += p.dim(0);
                }
              });
  return out;
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len) {
  Graph* g = x.graph();
  if (x.rank() != 2)
    throw std::invalid_argument("slice_rows: expected 2-D, got " +
                                shape_str(x.shape()));
  const std::int64_t m = x.dim(0), n = x.dim(1);
  if (start < 0 || len < 1 || start + len > m)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) +
                                "," + std::to_string(start + len) +
                                ") out of bounds for " + shape_str(x.shape()));
  Tensor out = g->make_result(
      {len, n}, eval_mat(len, n, as_mat(x.values(), m, n).middleRows(start, len)));
  if (g->training())
    g->record("slice_rows", {x}, out, 0, {},
              [xd = x.data_ptr(), start, len, m, n](ArrayX& go,
                                                    const GradSink& sink) {
                ArrayX gx = ArrayX::Zero(m * n);
                MatMap(gx.data(), m, n).middleRows(start, len) =
                    as_mat(go, len, n);
                sink(xd, std::move(gx));
              });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  Graph* g = x.graph();
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(x.shape()) + " as " +
                                shape_str(shape));
  Tensor out = g->make_result(std::move(shape), x.values());
  if (g->training())
    g->record("reshape", {x}, out, 0, {},
              [xd = x.data_ptr()](ArrayX& go, const GradSink& sink) {
                sink(xd, std::move(go));
              });
  return out;
}

Tensor lerp_gather(const Tensor& f, const std::vector<double>& positions,
                   std::int64_t rows_per_group) {
  Graph* g = f.graph();
  if (f.rank() != 2)
    throw std::invalid_argument("lerp_gather: expected 2-D features, got " +
                                shape_str(f.shape()));
  const std::int64_t n = f.dim(0), c = f.dim(1);
  const std::int64_t p = static_cast<std::int64_t>(positions.size());
  if (rows_per_group < 1 || p % rows_per_group != 0)
    throw std::invalid_argument(
        "lerp_gather: position count not divisible by rows_per_group");
  std::vector<std::int64_t> lo(p), hi(p);
  std::vector<double> w(p);
  for (std::int64_t i = 0; i < p; ++i) {
    double pos = positions[static_cast<std::size_t>(i)];
    if (!(pos == pos))
      throw std::invalid_argument("lerp_gather: non-finite position");
    pos = std::min(std::max(pos, 0.0), double(n - 1));
    lo[i] = static_cast<std::int64_t>(std::floor(pos));
    hi[i] = std::min(lo[i] + 1, n - 1);
    w[i] = pos - double(lo[i]);
  }
  ArrayX res_flat(p * c);
  MatMap res(res_flat.data(), p, c);
  auto fm = as_mat(f.values(), n, c);
  for (std::int64_t i = 0; i < p; ++i)
    res.row(i) = (1.0 - w[i]) * fm.row(lo[i]) + w[i] * fm.row(hi[i]);
  Tensor out = g->make_result({p / rows_per_group, rows_per_group * c},
                              std::move(res_flat));
  const std::uint64_t flops = static_cast<std::uint64_t>(3 * p * c);
  g->count_forward_flops(flops);
  if (g->training())
    g->record("lerp_gather", {f}, out, flops, {},
              [fd = f.data_ptr(), lo, hi, w, n, c, p](ArrayX& go,
                                                      const GradSink& sink) {
                ArrayX gf_flat = ArrayX::Zero(n * c);
                MatMap gf(gf_flat.data(), n, c);
                auto gm = as_mat(go, p, c);
                for (std::int64_t i = 0; i < p; ++i) {
                  gf.row(lo[i]) += (1.0 - w[i]) * gm.row(i);
                  gf.row(hi[i]) += w[i] * gm.row(i);
                }
                sink(fd, std::move(gf_flat));
              });
  return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int num_groups, double eps) {
  Graph* g = common_graph({&x, &gamma, &beta}, "group_norm");
  if (x.rank() != 2)
    throw std::invalid_argument("group_norm: expected 2-D, got " +
                                shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (num_groups < 1 || c % num_groups != 0)
    throw std::invalid_argument(
        "group_norm: channel count " + std::to_string(c) +
        " not divisible by group count " + std::to_string(num_groups));
  if (gamma.size() != c || beta.size() != c)
    throw std::invalid_argument("group_norm: gamma/beta must have " +
                                std::to_string(c) + " channels");
  const std::int64_t cg = c / num_groups;

  auto xm = as_mat(x.values(), n, c);
  Eigen::VectorXd mean(num_groups), inv_std(num_groups);
  MatrixR xhat(n, c);
  for (int gi = 0; gi < num_groups; ++gi) {
    auto block = xm.middleCols(gi * cg, cg);
    const double m = block.mean();
    const double var = (block.array() - m).square().sum() / double(n * cg);
    mean[gi] = m;
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    xhat.middleCols(gi * cg, cg) = (block.array() - m) * inv_std[gi];
  }
  MatrixR res = xhat;
  for (std::int64_t j = 0; j < c; ++j)
    res.col(j) = res.col(j) * gamma.value_at(j) + Eigen::VectorXd::Constant(n, beta.value_at(j));
  Tensor out = g->make_result({n, c}, mat_to_array(res));
  const std::uint64_t flops = static_cast<std::uint64_t>(8 * n * c);
  g->count_forward_flops(flops);
  if (g->training())
    g->record(
        "group_norm", {x, gamma, beta}, out, flops, {x},
        [x, gamma, beta, xhat, inv_std, num_groups, n, c,
         cg](ArrayX& go, const GradSink& sink) {
          auto gm = as_mat(go, n, c);
          MatrixR gx(n, c);
          ArrayX ggamma = ArrayX::Zero(c), gbeta = ArrayX::Zero(c);
          for (std::int64_t j = 0; j < c; ++j) {
            ggamma[j] = (gm.col(j).array() * xhat.col(j).array()).sum();
            gbeta[j] = gm.col(j).sum();
          }
          for (int gi = 0; gi < num_groups; ++gi) {
            MatrixR dxhat(n, cg);
            for (std::int64_t j = 0; j < cg; ++j)
              dxhat.col(j) =
                  gm.col(gi * cg + j) * gamma.value_at(gi * cg + j);
            auto xh = xhat.middleCols(gi * cg, cg);
            const double m_elems = double(n * cg);
            const double mean_dxhat = dxhat.sum() / m_elems;
            const double mean_dxhat_xhat =
                (dxhat.array() * xh.array()).sum() / m_elems;
            gx.middleCols(gi * cg, cg) =
                ((dxhat.array() - mean_dxhat) - xh.array() * mean_dxhat_xhat) *
                inv_std[gi];
          }
          sink(x.data_ptr(), mat_to_array(gx));
          sink(gamma.data_ptr(), ggamma);
          sink(beta.data_ptr(), gbeta);
        });
  return out;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  Graph* g = common_graph({&pred, &target}, "smooth_l1");
  if (pred.shape() != target.shape()) shape_error("smooth_l1", pred, target);
  ArrayX d = pred.values() - target.values();
  ArrayX out_v =
      (d.abs() < 1.0).select(0.5 * d * d, d.abs() - 0.5);
  Tensor out = g->make_result(pred.shape(), std::move(out_v));
  const std::uint64_t flops = static_cast<std::uint64_t>(pred.size());
  g->count_forward_flops(flops);
  if (g->training())
    g->record("smooth_l1", {pred, target}, out, flops, {pred, target},
              [pred, target](ArrayX& go, const GradSink& sink) {
                ArrayX d = pred.values() - target.values();
                ArrayX dd = d.max(-1.0).min(1.0);  // d if |d|<1 else sign(d)
                sink(pred.data_ptr(), ArrayX(go * dd));
                sink(target.data_ptr(), ArrayX(-go * dd));
              });
  return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  Graph* g = common_graph({&x, &w, &b}, "conv1d");
  if (x.rank() != 3)
    throw std::invalid_argument("conv1d: expected 3-D input, got " +
                                shape_str(x.shape()));
  if (w.rank() != 3 || w.dim(2) != 3 || w.dim(1) != x.dim(2))
    throw std::invalid_argument("conv1d: weight " + shape_str(w.shape()) +
                                " incompatible with input " +
                                shape_str(x.shape()));
  const std::int64_t k = x.dim(0), t = x.dim(1), cin = x.dim(2);
  const std::int64_t cout = w.dim(0);
  if (b.size() != cout)
    throw std::invalid_argument("conv1d: bias size mismatch");

  // tap matrices W_j (cin x cout), j in {0,1,2} maps input offset j-1
  auto tap = [&](const ArrayX& wflat, int j) {
    MatrixR wj(cin, cout);
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t i = 0; i < cin; ++i)
        wj(i, o) = wflat[(o * cin + i) * 3 + j];
    return wj;
  };
  MatrixR taps[3] = {tap(w.values(), 0), tap(w.values(), 1),
                     tap(w.values(), 2)};

  auto xm = as_mat(x.values(), k * t, cin);
  MatrixR out_m = MatrixR::Zero(k * t, cout);
  out_m.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values().data(), cout);
  for (std::int64_t s = 0; s < k; ++s) {
    auto xs = xm.middleRows(s * t, t);
    auto os = out_m.middleRows(s * t, t);
    for (int j = 0; j < 3; ++j) {
      const std::int64_t off = j - 1;
      const std::int64_t a = std::max<std::int64_t>(0, -off);
      const std::int64_t len = t - std::max<std::int64_t>(0, off) - a;
      if (len <= 0) continue;
      os.middleRows(a, len).noalias() +=
          xs.middleRows(a + off, len) * taps[j];
    }
  }
  Tensor out = g->make_result({k, t, cout}, mat_to_array(out_m));
  const std::uint64_t flops =
      static_cast<std::uint64_t>(2 * k * t * 3 * cin * cout + k * t * cout);
  g->count_forward_flops(flops);
  if (g->training())
    g->record(
        "conv1d", {x, w, b}, out, flops, {x},
        [x, w, b, k, t, cin, cout, taps0 = taps[0], taps1 = taps[1],
         taps2 = taps[2]](ArrayX& go, const GradSink& sink) {
          const MatrixR* taps[3] = {&taps0, &taps1, &taps2};
          auto gm = as_mat(go, k * t, cout);
          auto xm = as_mat(x.values(), k * t, cin);
          MatrixR gx = MatrixR::Zero(k * t, cin);
          MatrixR gw_taps[3] = {MatrixR::Zero(cin, cout),
                                MatrixR::Zero(cin, cout),
                                MatrixR::Zero(cin, cout)};
          for (std::int64_t s = 0; s < k; ++s) {
            auto gs = gm.middleRows(s * t, t);
            auto xs = xm.middleRows(s * t, t);
            auto gxs = gx.middleRows(s * t, t);
            for (int j = 0; j < 3; ++j) {
              const std::int64_t off = j - 1;
              const std::int64_t a = std::max<std::int64_t>(0, -off);
              const std::int64_t len = t - std::max<std::int64_t>(0, off) - a;
              if (len <= 0) continue;
              gxs.middleRows(a + off, len).noalias() +=
                  gs.middleRows(a, len) * taps[j]->transpose();
              gw_taps[j].noalias() +=
                  xs.middleRows(a + off, len).transpose() * gs.middleRows(a, len);
            }
          }
          ArrayX gw = ArrayX::Zero(cout * cin * 3);
          for (int j = 0; j < 3; ++j)
            for (std::int64_t o = 0; o < cout; ++o)
              for (std::int64_t i = 0; i < cin; ++i)
                gw[(o * cin + i) * 3 + j] = gw_taps[j](i, o);
          ArrayX gb = mat_to_array(gm.colwise().sum());
          sink(x.data_ptr(), mat_to_array(gx));
          sink(w.data_ptr(), gw);
          sink(b.data_ptr(), gb);
        });
  return out;
}

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs) {
  auto need = [&](std::size_t n, const char* name) {
    if (inputs.size() != n)
      throw std::invalid_argument(std::string(name) + ": expected " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::kAdd:
      need(2, "add");
      return add(inputs[0], inputs[1]);
    case OpKind::kMul:
      need(2, "mul");
      return mul(inputs[0], inputs[1]);
    case OpKind::kMatmul:
      need(2, "matmul");
      return matmul(inputs[0], inputs[1]);
    case OpKind::kRelu:
      need(1, "relu");
      return relu(inputs[0]);
    case OpKind::kSigmoid:
      need(1, "sigmoid");
      return sigmoid(inputs[0]);
    case OpKind::kTanh:
      need(1, "tanh");
      return tanh(inputs[0]);
    case OpKind::kLog:
      need(1, "log");
      return log(inputs[0]);
    case OpKind::kSumAll:
      need(1, "sum_all");
      return sum_all(inputs[0]);
    case OpKind::kSmoothL1:
      need(2, "smooth_l1");
      return smooth_l1(inputs[0], inputs[1]);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

OpKind op_kind_from_string(const std::string& name) {
  if (name == "add") return OpKind::kAdd;
  if (name == "mul") return OpKind::kMul;
  if (name == "matmul") return OpKind::kMatmul;
  if (name == "relu") return OpKind::kRelu;
  if (name == "sigmoid") return OpKind::kSigmoid;
  if (name == "tanh") return OpKind::kTanh;
  if (name == "log") return OpKind::kLog;
  if (name == "sum_all") return OpKind::kSumAll;
  if (name == "smooth_l1") return OpKind::kSmoothL1;
  throw std::invalid_argument("unknown op kind: " + name);
}

Tensor scale(const Tensor& x, double c) {
  return mul(x, x.graph()->scalar(c));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

}  // namespace etad
