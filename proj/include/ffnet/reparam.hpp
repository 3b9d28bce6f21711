#pragma once

// Structural re-parameterization: BN folding and multi-branch kernel merging.

#include <optional>
#include <string>
#include <vector>

#include "ffnet/ffnet_image.hpp"

namespace ffnet {

template <typename T>
struct Branch {
  ConvLayer<T> conv;
  std::optional<BatchNormParams<T>> bn;
};

/// Parallel convolutions over the same input; outputs are summed.
template <typename T>
struct BranchSet {
  Branch<T> main;
  std::vector<Branch<T>> aux;
};

/// W' = W * g/sqrt(v+eps) per output channel, b' = (b - mu) * g/sqrt(v+eps) + beta.
template <typename T>
ConvLayer<T> fold_bn(const ConvLayer<T>& conv, const BatchNormParams<T>& bn);

/// Zero-pads the trailing two axes of `small` to kh x kw, centered.
template <typename T>
Tensor<T> embed_kernel(const Tensor<T>& small, std::size_t kh, std::size_t kw);

/// One conv equivalent to the sum of all (conv -> BN) branches.
template <typename T>
ConvLayer<T> merge_branches(const BranchSet<T>& b);

/// Oracle: evaluates every branch separately and sums (BN in infer mode).
template <typename T>
Tensor<T> branch_set_forward(const BranchSet<T>& b, const Tensor<T>& x);

template <typename T>
BranchSet<T> to_branch_set(const BranchedConv<T>& b);

/// Same model with every branched conv merged and every BN folded.
template <typename T>
FFNetModel<T> reparameterize_model(const FFNetModel<T>& model);

struct LayerDiff {
  std::string name;
  double max_diff = 0;
};

struct EquivalenceReport {
  std::size_t samples = 0;
  double tol = 0;
  double max_diff = 0;  // logits
  std::vector<LayerDiff> layers;
  bool pass = false;
};

/// Compares logits of two models on n_samples random inputs of size
/// hw x hw, and each pair of corresponding branched convs on a random
/// feature map. Both models must be in infer mode and share structure
/// up to branching.
template <typename T>
EquivalenceReport assert_equivalence(FFNetModel<T>& original, FFNetModel<T>& merged, std::size_t n_samples,
                                     double tol, std::size_t hw, std::uint64_t seed, std::size_t batch = 4);

/// Count of auxiliary branches and BN records left in a model.
template <typename T>
std::size_t count_aux_branches(const FFNetModel<T>& m);
template <typename T>
std::size_t count_bn_records(const FFNetModel<T>& m);

}  // namespace ffnet
