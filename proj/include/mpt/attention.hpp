#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mpt/diffeo.hpp"
#include "mpt/sca.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

inline constexpr std::size_t kDefaultWindow = 4;

/// Windowed multi-head self-attention parameters. Projections are [C,C];
/// bias_table is [(2*win_h-1)*(2*win_w-1), heads], indexed by the relative
/// offset between two tokens of a window.
struct MHAParams {
  Tensor wq, wk, wv, wo;
  Tensor bias_table;
  std::size_t heads = 4;
  std::size_t win_h = kDefaultWindow;
  std::size_t win_w = kDefaultWindow;
};

struct WindowAttentionCache {
  Tensor input;  // [N*L, C]
  Tensor q, k, v;
  Tensor attn;    // [N, heads, L, L]
  Tensor merged;  // [N*L, C], head outputs before wo
};

/// windows: [N_win, L, C] with L == win_h*win_w.
Tensor window_attention(const Tensor& windows, const MHAParams& p, WindowAttentionCache* cache = nullptr);

/// Relative-position bias index of tokens a, b inside one window.
std::size_t relative_bias_index(std::size_t a, std::size_t b, std::size_t win_h, std::size_t win_w);

enum class Fusion { sequential, parallel_sum };

/// Weights of one spatial + semantic transformer block.
struct BlockParams {
  Tensor ln1_g, ln1_b;
  MHAParams attn;
  Tensor ln2_g, ln2_b;
  ClusterState clusters;
  SCAParams sca;
  Tensor ln3_g, ln3_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  /// Visits every learnable tensor with a stable name.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);

  /// Same structure with every tensor zeroed (gradient accumulator).
  BlockParams zeros_like() const;

  static BlockParams init(std::size_t channels, std::size_t heads, std::size_t window, std::size_t clusters,
                          std::size_t sca_heads, double beta, std::mt19937_64& rng);
};

struct BlockOptions {
  bool shifted = false;
  bool use_sca = true;
  Fusion fusion = Fusion::sequential;
  CoreUpdate core_mode = CoreUpdate::residual;
};

/// Deformation shared by the blocks of one stage. When `identity` is set the
/// morph path is skipped entirely.
struct StageFields {
  DeformationField forward;
  DeformationField inverse;
  bool identity = true;

  static StageFields none() { return {}; }
};

struct BlockCache {
  std::size_t h = 0, w = 0;
  LayerNormCache ln1;
  Tensor a_img;     // LN1 output as image
  Tensor deformed;  // after the forward warp
  WindowAttentionCache wa;
  Tensor attn_img;  // merged + unshifted, before the inverse warp
  LayerNormCache ln2;
  Tensor sca_in;    // SCA input tokens
  Tensor assign;    // soft assignment [m, n]
  ScaCache sca;
  LayerNormCache ln3;
  Tensor ln3_out;
  Tensor mlp_pre;   // before GELU
  Tensor mlp_hidden;
};

/// LN -> deform -> (shift) -> window attention -> (unshift) -> inverse deform
/// -> residual -> LN -> SCA -> residual -> LN -> MLP -> residual.
Tensor mpt_block(const Tensor& x, const StageFields& fields, const BlockParams& p, const BlockOptions& opt,
                 BlockCache* cache = nullptr);

/// Gradients of one block. d_phi / d_phi_inv are offset-field gradients
/// ([2,H,W]); they are left empty when the morph path is disabled.
struct BlockGrads {
  BlockParams params;
  Tensor d_x;
  Tensor d_phi;
  Tensor d_phi_inv;
};

BlockGrads mpt_block_backward(const BlockCache& cache, const Tensor& d_out, const StageFields& fields,
                              const BlockParams& p, const BlockOptions& opt);

}  // namespace mpt
