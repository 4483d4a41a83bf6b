#pragma once

#include <cstdint>
#include <random>

#include "mpt/tensor.hpp"

namespace mpt {

inline constexpr std::size_t kDefaultClusters = 32;
inline constexpr std::size_t kDefaultScaHeads = 4;
inline constexpr double kCoreUpdateEps = 1e-8;

/// Soft K-means state: cores F_core [n,d], linear assignment weights
/// lambda [n,d] and biases mu [n]. beta is only meaningful for states built
/// by `derived`, where lambda = 2*beta*core and mu = -beta*|core|^2.
struct ClusterState {
  Tensor cores;
  Tensor lambda;
  Tensor mu;
  double beta = 1.0;

  std::size_t clusters() const { return cores.dim(0); }
  std::size_t dim() const { return cores.dim(1); }

  static ClusterState derived(Tensor cores, double beta);
  /// Cores drawn from N(0, 1/d), lambda/mu derived with the given beta.
  static ClusterState random(std::size_t clusters, std::size_t d, double beta, std::mt19937_64& rng);
};

enum class CoreUpdate { verbatim, residual };

/// Projections for semantic clustering attention. All are [d, d]; the
/// columns split evenly into `heads` heads.
struct SCAParams {
  Tensor wq;
  Tensor wk;
  Tensor wv;
  std::size_t heads = kDefaultScaHeads;

  std::size_t dim() const { return wq.dim(0); }
  /// Logit scale 1/sqrt(d).
  double scale() const;
};

/// Row-wise softmax over clusters of lambda . f + mu; [m, n].
Tensor soft_assign(const Tensor& features, const ClusterState& cs);

/// Gaussian-kernel assignment exp(-beta |f - core|^2) normalized over
/// cores. Equals soft_assign for derived states.
Tensor soft_assign_gaussian(const Tensor& features, const Tensor& cores, double beta);

/// Core update from assignments g [m, n].
///   verbatim: sum_i g_is (f_i - core_s)
///   residual: core_s + sum_i g_is (f_i - core_s) / max(sum_i g_is, eps)
Tensor update_cores(const Tensor& features, const Tensor& cores, const Tensor& assign, CoreUpdate mode);
Tensor update_cores(const Tensor& features, const ClusterState& cs, CoreUpdate mode = CoreUpdate::residual);

struct ScaCache {
  Tensor features;
  Tensor new_cores;
  Tensor q, k, v;
  Tensor attn;  // [heads, m, n]
};

/// Multi-head cross-attention from the m feature rows to the n cores:
/// softmax((F Wq)(N Wk)^T * scale) (N Wv), per head, concatenated.
/// Cost is O(m n d); no m x m intermediate is formed.
Tensor sca_forward(const Tensor& features, const Tensor& new_cores, const SCAParams& p,
                   ScaCache* cache = nullptr);

/// Attention weights of one head, [m, n]. Exposed for inspection and tests.
Tensor sca_attention_weights(const Tensor& features, const Tensor& new_cores, const SCAParams& p,
                             std::size_t head);

}  // namespace mpt
