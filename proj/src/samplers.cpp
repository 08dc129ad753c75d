#include "etad/samplers.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace etad {

SamplerKind sampler_from_string(const std::string& name) {
  if (name == "random") return SamplerKind::kRandom;
  if (name == "grid") return SamplerKind::kGrid;
  if (name == "block") return SamplerKind::kBlock;
  if (name == "fps") return SamplerKind::kFps;
  if (name == "kdpp") return SamplerKind::kKdpp;
  if (name == "iou_balanced") return SamplerKind::kIouBalanced;
  if (name == "scale_balanced") return SamplerKind::kScaleBalanced;
  throw std::invalid_argument("unknown sampler: " + name);
}

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::kRandom: return "random";
    case SamplerKind::kGrid: return "grid";
    case SamplerKind::kBlock: return "block";
    case SamplerKind::kFps: return "fps";
    case SamplerKind::kKdpp: return "kdpp";
    case SamplerKind::kIouBalanced: return "iou_balanced";
    case SamplerKind::kScaleBalanced: return "scale_balanced";
  }
  throw std::invalid_argument("unknown sampler kind");
}

std::size_t SampleRequest::resolve_k() const {
  std::size_t k;
  if (explicit_k)
    k = *explicit_k;
  else
    k = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(n_total) + 0.5));
  if (k < 1) k = 1;
  if (k > n_total)
    throw std::invalid_argument("sample: k=" + std::to_string(k) +
                                " exceeds candidate count " +
                                std::to_string(n_total));
  return k;
}

namespace {

std::vector<std::size_t> sorted(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  return v;
}

void require_embeddings(const SampleRequest& req, const char* who) {
  if (!req.embeddings ||
      static_cast<std::size_t>(req.embeddings->rows()) != req.n_total)
    throw std::invalid_argument(std::string(who) +
                                ": embeddings of shape (n_total, C) required");
  if (!req.embeddings->allFinite())
    throw std::invalid_argument(std::string(who) +
                                ": embeddings contain non-finite values");
}

}  // namespace

std::vector<std::size_t> sample_random(std::size_t n, std::size_t k,
                                       RngStream& rng) {
  if (k > n) throw std::invalid_argument("sample_random: k > n");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return sorted(std::move(idx));
}

std::vector<std::size_t> sample_grid(const SampleRequest& req) {
  const std::size_t n = req.n_total;
  const std::size_t k = req.resolve_k();

  if (!req.lattice) {
    // 1-D: indices round(j * n / k)
    std::vector<std::size_t> out(k);
    for (std::size_t j = 0; j < k; ++j)
      out[j] = static_cast<std::size_t>(std::floor(
          static_cast<double>(j) * static_cast<double>(n) / double(k) + 0.5));
    return out;
  }

  // 2-D proposal map: keep candidates whose (s, e) both sit on a stride
  // lattice, stride = ceil(sqrt(1/gamma)); then trim to k in s-major order
  // or pad with the lowest-index unselected candidates.
  if (req.lattice->size() != n)
    throw std::invalid_argument("sample_grid: lattice size mismatch");
  const double gamma = static_cast<double>(k) / static_cast<double>(n);
  const int stride =
      std::max(1, static_cast<int>(std::ceil(std::sqrt(1.0 / gamma))));
  std::vector<std::size_t> out;
  std::vector<char> taken(n, 0);
  for (std::size_t i = 0; i < n && out.size() < k; ++i) {
    const auto& [s, e] = (*req.lattice)[i];
    if (s % stride == 0 && e % stride == 0) {
      out.push_back(i);
      taken[i] = 1;
    }
  }
  for (std::size_t i = 0; i < n && out.size() < k; ++i)
    if (!taken[i]) out.push_back(i);
  return sorted(std::move(out));
}

std::vector<std::size_t> sample_block(const SampleRequest& req,
                                      RngStream& rng) {
  const std::size_t n = req.n_total;
  const std::size_t k = req.resolve_k();

  if (!req.lattice) {
    const std::size_t start =
        static_cast<std::size_t>(rng.uniform_int(n - k + 1));
    std::vector<std::size_t> out(k);
    std::iota(out.begin(), out.end(), start);
    return out;
  }

  // 2-D: proposals falling inside a random temporal window just long enough
  // to hold k of them, in s-major order
  if (req.lattice->size() != n)
    throw std::invalid_argument("sample_block: lattice size mismatch");
  const int t = req.lattice_t;
  int len = 2;
  while (static_cast<std::size_t>(len) * (len - 1) / 2 < k && len < t) ++len;
  const int start = static_cast<int>(rng.uniform_int(t - len + 1));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n && out.size() < k; ++i) {
    const auto& [s, e] = (*req.lattice)[i];
    if (s >= start && e <= start + len - 1) out.push_back(i);
  }
  for (std::size_t i = 0; i < n && out.size() < k; ++i) {
    const auto& [s, e] = (*req.lattice)[i];
    if (s < start || e > start + len - 1) out.push_back(i);
  }
  return sorted(std::move(out));
}

std::vector<std::size_t> fps_select(const MatrixR& embeddings, std::size_t k,
                                    std::size_t start_index) {
  const std::size_t n = static_cast<std::size_t>(embeddings.rows());
  if (k > n) throw std::invalid_argument("fps_select: k > n");
  std::vector<std::size_t> picked;
  picked.reserve(k);
  std::vector<char> in_set(n, 0);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  std::size_t current = start_index;
  picked.push_back(current);
  in_set[current] = 1;
  while (picked.size() < k) {
    std::size_t best = n;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d2 =
          (embeddings.row(static_cast<Eigen::Index>(i)) -
           embeddings.row(static_cast<Eigen::Index>(current)))
              .squaredNorm();
      min_d2[i] = std::min(min_d2[i], d2);
      if (!in_set[i] && min_d2[i] > best_d2) {  // ties keep the lowest index
        best_d2 = min_d2[i];
        best = i;
      }
    }
    picked.push_back(best);
    in_set[best] = 1;
    current = best;
  }
  return picked;
}

std::vector<std::size_t> sample_fps(const SampleRequest& req, RngStream& rng) {
  require_embeddings(req, "sample_fps");
  const std::size_t k = req.resolve_k();
  const std::size_t start =
      req.fps_random_start
          ? static_cast<std::size_t>(rng.uniform_int(req.n_total))
          : 0;
  return sorted(fps_select(*req.embeddings, k, start));
}

MatrixR kdpp_kernel(const MatrixR& embeddings, double ridge) {
  MatrixR xn = embeddings;
  for (Eigen::Index i = 0; i < xn.rows(); ++i) {
    const double norm = xn.row(i).norm();
    if (norm > 0.0) xn.row(i) /= norm;
  }
  MatrixR l = xn * xn.transpose();
  l.diagonal().array() += ridge;
  return l;
}

namespace {

// elementary symmetric polynomials: E(r, i) = e_r(lambda_1..lambda_i)
MatrixR esym(const Eigen::VectorXd& lambda, std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(lambda.size());
  MatrixR e = MatrixR::Zero(k + 1, n + 1);
  e.row(0).setOnes();
  for (std::size_t r = 1; r <= k; ++r)
    for (std::size_t i = 1; i <= n; ++i)
      e(r, i) = e(r, i - 1) + lambda[static_cast<Eigen::Index>(i - 1)] *
                                  e(r - 1, i - 1);
  return e;
}

}  // namespace

std::vector<std::size_t> sample_kdpp(const SampleRequest& req,
                                     RngStream& rng) {
  require_embeddings(req, "sample_kdpp");
  const std::size_t n = req.n_total;
  const std::size_t k = req.resolve_k();

  MatrixR l = kdpp_kernel(*req.embeddings);
  Eigen::SelfAdjointEigenSolver<MatrixR> eig(l);
  if (eig.info() != Eigen::Success)
    throw std::runtime_error("sample_kdpp: eigendecomposition failed");
  Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
  const MatrixR& vecs = eig.eigenvectors();

  // choose a size-k eigenvector subset with P proportional to the product of
  // its eigenvalues
  MatrixR e = esym(lambda, k);
  std::vector<std::size_t> chosen;
  std::size_t remaining = k;
  for (std::size_t i = n; i >= 1 && remaining > 0; --i) {
    double marginal;
    if (i == remaining)
      marginal = 1.0;
    else
      marginal = lambda[static_cast<Eigen::Index>(i - 1)] *
                 e(remaining - 1, i - 1) / e(remaining, i);
    if (rng.uniform() < marginal) {
      chosen.push_back(i - 1);
      --remaining;
    }
  }

  // orthogonal-projection elimination over the selected eigenvectors
  MatrixR v(n, chosen.size());
  for (std::size_t j = 0; j < chosen.size(); ++j)
    v.col(static_cast<Eigen::Index>(j)) =
        vecs.col(static_cast<Eigen::Index>(chosen[j]));

  std::vector<std::size_t> items;
  items.reserve(k);
  while (v.cols() > 0) {
    Eigen::VectorXd weights = v.rowwise().squaredNorm();
    const double total = weights.sum();
    double r = rng.uniform() * total;
    std::size_t pick = n - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += weights[static_cast<Eigen::Index>(i)];
      if (r < acc) {
        pick = i;
        break;
      }
    }
    items.push_back(pick);
    if (v.cols() == 1) break;

    // eliminate the component of the subspace along e_pick: subtract the
    // column with the largest entry at `pick`, then re-orthonormalize
    Eigen::Index piv = 0;
    double best = -1.0;
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const double a = std::abs(v(static_cast<Eigen::Index>(pick), j));
      if (a > best) {
        best = a;
        piv = j;
      }
    }
    Eigen::VectorXd vp = v.col(piv);
    const double denom = vp[static_cast<Eigen::Index>(pick)];
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      if (j == piv) continue;
      v.col(j) -= vp * (v(static_cast<Eigen::Index>(pick), j) / denom);
    }
    // drop the pivot column, keep the rest
    MatrixR rest(n, v.cols() - 1);
    Eigen::Index jj = 0;
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      if (j != piv) rest.col(jj++) = v.col(j);
    // Gram-Schmidt re-orthonormalization
    for (Eigen::Index j = 0; j < rest.cols(); ++j) {
      for (Eigen::Index p = 0; p < j; ++p)
        rest.col(j) -= rest.col(p).dot(rest.col(j)) * rest.col(p);
      const double nn = rest.col(j).norm();
      if (nn > 1e-12) rest.col(j) /= nn;
    }
    v = std::move(rest);
  }
  return sorted(std::move(items));
}

std::vector<std::size_t> balanced_quotas(
    std::size_t k, const std::vector<std::size_t>& bin_sizes) {
  const std::size_t n_bins = bin_sizes.size();
  std::vector<std::size_t> quota(
      n_bins, static_cast<std::size_t>(std::floor(
                  static_cast<double>(k) / double(n_bins) + 0.5)));
  auto total = [&] {
    return std::accumulate(quota.begin(), quota.end(), std::size_t{0});
  };
  while (total() > k) {  // trim from the largest bin, ties -> highest index
    std::size_t arg = 0;
    for (std::size_t b = 0; b < n_bins; ++b)
      if (quota[b] >= quota[arg]) arg = b;
    --quota[arg];
  }
  while (total() < k) {
    std::size_t arg = 0;
    for (std::size_t b = 0; b < n_bins; ++b)
      if (quota[b] < quota[arg]) arg = b;
    ++quota[arg];
  }
  // redistribute deficits of underpopulated bins round-robin to bins with
  // spare capacity
  for (std::size_t b = 0; b < n_bins; ++b)
    quota[b] = std::min(quota[b], bin_sizes[b]);
  std::size_t deficit = k - total();
  std::size_t cursor = 0;
  std::size_t misses = 0;
  while (deficit > 0) {
    if (quota[cursor] < bin_sizes[cursor]) {
      ++quota[cursor];
      --deficit;
      misses = 0;
    } else if (++misses == n_bins) {
      throw std::invalid_argument(
          "balanced sampler: candidates cannot cover k");
    }
    cursor = (cursor + 1) % n_bins;
  }
  return quota;
}

namespace {

std::vector<std::size_t> sample_balanced(const SampleRequest& req,
                                         RngStream& rng, const char* who) {
  if (!req.labels || req.labels->size() != req.n_total)
    throw std::invalid_argument(std::string(who) +
                                ": per-candidate labels required");
  const std::size_t k = req.resolve_k();
  const double edges[2] = {0.3, 0.7};
  std::vector<std::vector<std::size_t>> bins(3);
  for (std::size_t i = 0; i < req.n_total; ++i) {
    const double v = (*req.labels)[i];
    const int b = v < edges[0] ? 0 : (v < edges[1] ? 1 : 2);
    bins[static_cast<std::size_t>(b)].push_back(i);
  }
  std::vector<std::size_t> sizes = {bins[0].size(), bins[1].size(),
                                    bins[2].size()};
  std::vector<std::size_t> quota = balanced_quotas(k, sizes);
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<std::size_t> pick = sample_random(sizes[b], quota[b], rng);
    for (std::size_t p : pick) out.push_back(bins[b][p]);
  }
  return sorted(std::move(out));
}

}  // namespace

std::vector<std::size_t> sample_iou_balanced(const SampleRequest& req,
                                             RngStream& rng) {
  return sample_balanced(req, rng, "sample_iou_balanced");
}

std::vector<std::size_t> sample_scale_balanced(const SampleRequest& req,
                                               RngStream& rng) {
  return sample_balanced(req, rng, "sample_scale_balanced");
}

std::vector<std::size_t> sample(const SampleRequest& req, RngStream& rng) {
  if (req.n_total == 0)
    throw std::invalid_argument("sample: empty candidate set");
  switch (req.strategy) {
    case SamplerKind::kRandom:
      return sample_random(req.n_total, req.resolve_k(), rng);
    case SamplerKind::kGrid:
      return sample_grid(req);
    case SamplerKind::kBlock:
      return sample_block(req, rng);
    case SamplerKind::kFps:
      return sample_fps(req, rng);
    case SamplerKind::kKdpp:
      return sample_kdpp(req, rng);
    case SamplerKind::kIouBalanced:
      return sample_iou_balanced(req, rng);
    case SamplerKind::kScaleBalanced:
      return sample_scale_balanced(req, rng);
  }
  throw std::invalid_argument("sample: unknown strategy");
}

std::vector<std::pair<std::vector<std::size_t>, double>>
kdpp_marginals_bruteforce(const MatrixR& L, std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(L.rows());
  if (n > 12)
    throw std::invalid_argument("kdpp_marginals_bruteforce: n > 12");
  if (k < 1 || k > n)
    throw std::invalid_argument("kdpp_marginals_bruteforce: bad k");

  std::vector<std::pair<std::vector<std::size_t>, double>> out;
  std::vector<std::size_t> subset(k);
  double total = 0.0;

  // lexicographic enumeration of all size-k subsets
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t pos,
                                                          std::size_t next) {
    if (pos == k) {
      MatrixR sub(k, k);
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b)
          sub(a, b) = L(static_cast<Eigen::Index>(subset[a]),
                        static_cast<Eigen::Index>(subset[b]));
      const double det = sub.determinant();
      out.emplace_back(subset, det);
      total += det;
      return;
    }
    for (std::size_t i = next; i + (k - pos) <= n; ++i) {
      subset[pos] = i;
      rec(pos + 1, i + 1);
    }
  };
  rec(0, 0);
  for (auto& [_, p] : out) p /= total;
  return out;
}

}  // namespace etad
