#pragma once

#include "etad/rng.hpp"
#include "etad/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace etad {

enum class SamplerKind {
  kRandom,
  kGrid,
  kBlock,
  kFps,
  kKdpp,
  kIouBalanced,
  kScaleBalanced,
};

SamplerKind sampler_from_string(const std::string& name);
std::string to_string(SamplerKind kind);

// Subset-selection request shared by snippet-gradient sampling and proposal
// sampling. k = round-half-up(ratio * n_total) unless given explicitly;
// embeddings are required for fps/kdpp, labels for the balanced samplers,
// and the (s,e) lattice enables the 2-D grid/block variants on proposal
// maps.
struct SampleRequest {
  std::size_t n_total = 0;
  double ratio = 1.0;
  std::optional<std::size_t> explicit_k;
  SamplerKind strategy = SamplerKind::kRandom;
  const MatrixR* embeddings = nullptr;                    // n_total x C
  const std::vector<double>* labels = nullptr;            // iou or scale
  const std::vector<std::pair<int, int>>* lattice = nullptr;  // (s,e) pairs
  int lattice_t = 0;          // snippet count T behind the lattice
  bool fps_random_start = false;

  std::size_t resolve_k() const;
};

// Returns k distinct in-range indices, ascending. Deterministic per rng
// stream.
std::vector<std::size_t> sample(const SampleRequest& req, RngStream& rng);

std::vector<std::size_t> sample_random(std::size_t n, std::size_t k,
                                       RngStream& rng);
std::vector<std::size_t> sample_grid(const SampleRequest& req);
std::vector<std::size_t> sample_block(const SampleRequest& req,
                                      RngStream& rng);
// greedy max-min selection in selection order; ties resolved to the lowest
// index
std::vector<std::size_t> fps_select(const MatrixR& embeddings, std::size_t k,
                                    std::size_t start_index);
std::vector<std::size_t> sample_fps(const SampleRequest& req, RngStream& rng);
// exact k-DPP over the cosine kernel L = Xn Xn^T + 0.01 I (rows of X
// L2-normalized)
std::vector<std::size_t> sample_kdpp(const SampleRequest& req, RngStream& rng);
std::vector<std::size_t> sample_iou_balanced(const SampleRequest& req,
                                             RngStream& rng);
std::vector<std::size_t> sample_scale_balanced(const SampleRequest& req,
                                               RngStream& rng);

// cosine kernel with ridge used by sample_kdpp
MatrixR kdpp_kernel(const MatrixR& embeddings, double ridge = 0.01);

// Brute-force k-DPP distribution: P(S) = det(L_S) / sum over |S'|=k of
// det(L_S'), for all size-k subsets in lexicographic order. n <= 12.
std::vector<std::pair<std::vector<std::size_t>, double>>
kdpp_marginals_bruteforce(const MatrixR& L, std::size_t k);

// per-bin quotas used by the balanced samplers; exposed for verification
std::vector<std::size_t> balanced_quotas(std::size_t k,
                                         const std::vector<std::size_t>& bin_sizes);

}  // namespace etad
