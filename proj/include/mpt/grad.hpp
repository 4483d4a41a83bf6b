#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mpt/attention.hpp"
#include "mpt/diffeo.hpp"
#include "mpt/sca.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

// ---- parameter store --------------------------------------------------------

/// Named learnable tensors with gradient slots and Adam moments, iterated in
/// insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
    long step = 0;
  };

  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }
  /// grad(name) += g
  void accumulate(const std::string& name, const Tensor& g, double s = 1.0);

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of every entry; gradients are zeroed afterwards.
void adam_step(ParamStore& store, const AdamOptions& opt = {});

/// MPCK checkpoint: magic, u32 count, then per entry u16 name length, name
/// bytes and an MTK1 value tensor. Optimizer moments are not stored.
void write_checkpoint(std::ostream& os, const ParamStore& store);
ParamStore read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const ParamStore& store);
ParamStore load_checkpoint(const std::string& path);

// ---- finite differences -----------------------------------------------------

struct FdTarget {
  std::string name;
  Tensor* value = nullptr;
  const Tensor* analytic = nullptr;
};

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// central2: (f(x+h) - f(x-h)) / 2h.
/// central4: (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, for objectives
/// whose rounding noise swamps the second-order stencil at small h.
enum class FdStencil { central2, central4 };

/// Central differences on up to `max_coords` randomly chosen coordinates of
/// each target; relative error |a - n| / max(|a|, |n|, 1e-8). Targets are
/// perturbed in place and restored. Throws FormatError if f is not finite.
FdReport finite_diff_check(const std::function<double()>& f, const std::vector<FdTarget>& targets,
                           double eps = 1e-5, std::size_t max_coords = 200, std::uint64_t seed = 0,
                           FdStencil stencil = FdStencil::central2);

/// Same, over every entry of a store using its grad slots as the analytic side.
FdReport finite_diff_check(const std::function<double()>& f, ParamStore& store, double eps = 1e-5,
                           std::size_t max_coords = 200, std::uint64_t seed = 0,
                           FdStencil stencil = FdStencil::central2);

// ---- tensor kernels ---------------------------------------------------------

Tensor gelu_backward(const Tensor& x, const Tensor& d_out);

struct MatmulGrads {
  Tensor d_a, d_b;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& d_out);

/// y is the softmax output.
Tensor softmax_backward(const Tensor& y, const Tensor& d_out, int axis);

struct LayerNormGrads {
  Tensor d_x, d_gamma, d_beta;
};
LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& d_out);

struct Conv2dGrads {
  Tensor d_x, d_kernel, d_bias;
};
Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& d_out, int stride = 1);

/// d_coords has the layout of the coordinate argument ([H',W',2] for
/// grid_sample, [2,H',W'] for warp). Clamped coordinates get zero gradient.
struct SampleGrads {
  Tensor d_x, d_coords;
};
SampleGrads grid_sample_backward(const Tensor& x, const Tensor& coords, const Tensor& d_out);
SampleGrads warp_backward(const Tensor& x, const Tensor& offsets, const Tensor& d_out);

Tensor upsample_nearest2_backward(const Tensor& d_out);
std::pair<Tensor, Tensor> concat_channels_backward(const Tensor& d_out, std::size_t channels_a);

// ---- diffeo -----------------------------------------------------------------

struct ComposeGrads {
  Tensor d_outer, d_inner;
};
ComposeGrads compose_backward(const Tensor& outer, const Tensor& inner, const Tensor& d_out);

/// Backprop through the unrolled squarings recorded by exponentiate; returns
/// the gradient w.r.t. the velocity tensor.
Tensor exponentiate_backward(const std::vector<Tensor>& history, const Tensor& d_phi);

// ---- morphpatch -------------------------------------------------------------

/// Gradients w.r.t. the features and the offset field.
SampleGrads deform_features_backward(const Tensor& x, const DeformationField& phi, const Tensor& d_out);

// ---- sca --------------------------------------------------------------------

struct SoftAssignGrads {
  Tensor d_features, d_lambda, d_mu;
};
SoftAssignGrads soft_assign_backward(const Tensor& features, const Tensor& lambda, const Tensor& assign,
                                     const Tensor& d_assign);

struct UpdateCoresGrads {
  Tensor d_features, d_cores, d_assign;
};
UpdateCoresGrads update_cores_backward(const Tensor& features, const Tensor& cores, const Tensor& assign,
                                       CoreUpdate mode, const Tensor& d_out);

struct ScaGrads {
  Tensor d_features, d_new_cores, d_wq, d_wk, d_wv;
};
ScaGrads sca_backward(const ScaCache& cache, const SCAParams& p, const Tensor& d_out);

// ---- attention --------------------------------------------------------------

struct WindowAttentionGrads {
  Tensor d_windows;
  Tensor d_wq, d_wk, d_wv, d_wo, d_bias_table;
};
WindowAttentionGrads window_attention_backward(const WindowAttentionCache& cache, const MHAParams& p,
                                               const Tensor& d_out);

}  // namespace mpt
