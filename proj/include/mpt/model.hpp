#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mpt/attention.hpp"
#include "mpt/config.hpp"
#include "mpt/diffeo.hpp"
#include "mpt/grad.hpp"
#include "mpt/metrics.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

inline constexpr double kDefaultVMax = 4.0;
inline constexpr double kDiceSmooth = 1e-5;

// ---- velocity predictor -----------------------------------------------------

/// conv3x3 C->8, GELU, conv3x3 8->2, radial saturation to |v| < v_max.
struct VelocityPredictor {
  Tensor w1, b1;  // [8,C,3,3], [8]
  Tensor w2, b2;  // [2,8,3,3], [2]
  double v_max = kDefaultVMax;

  static constexpr std::size_t kHidden = 8;
  static VelocityPredictor init(std::size_t channels, double v_max, std::mt19937_64& rng);
};

/// v = v_max * tanh(r / v_max) / r * z with r = |z| per pixel ([2,H,W]).
Tensor saturate_velocity(const Tensor& z, double v_max);
Tensor saturate_velocity_backward(const Tensor& z, double v_max, const Tensor& d_v);

struct VelocityCache {
  Tensor input, hidden_pre, hidden, raw;
};

VelocityField predict_velocity(const Tensor& x, const VelocityPredictor& vp, VelocityCache* cache = nullptr);

struct VelocityGrads {
  Tensor d_x, d_w1, d_b1, d_w2, d_b2;
};
VelocityGrads predict_velocity_backward(const VelocityCache& cache, const VelocityPredictor& vp, const Tensor& d_v);

// ---- loss -------------------------------------------------------------------

/// 1 - mean over classes of (2 sum p t + s) / (sum p + sum t + s), p = softmax
/// over the class axis of logits [K,H,W].
double dice_loss(const Tensor& logits, const SegMask& target, double smooth = kDiceSmooth);
Tensor dice_loss_backward(const Tensor& logits, const SegMask& target, double smooth = kDiceSmooth);

/// Per-pixel argmax over classes; ties go to the lower class.
SegMask predict_labels(const Tensor& logits);

// ---- network ----------------------------------------------------------------

struct MPTNetConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 16;
  std::size_t stages = 2;
  std::size_t blocks = 1;  // shifted pairs per stage
  std::size_t n_clusters = kDefaultClusters;
  std::size_t window = kDefaultWindow;
  int n_squaring = kDefaultSquaringSteps;
  double v_max = kDefaultVMax;
  std::size_t num_classes = 2;
  std::size_t heads = 4;
  std::size_t sca_heads = kDefaultScaHeads;
  double beta = 1.0;
  Fusion fusion = Fusion::sequential;
  CoreUpdate core_mode = CoreUpdate::residual;
  bool use_mp = true;
  bool use_sca = true;

  void validate() const;
  std::size_t channels(std::size_t stage) const { return base_channels << stage; }
  /// Spatial extents are zero-padded up to a multiple of this.
  std::size_t pad_multiple() const { return window << (stages - 1); }
};

struct StageCache {
  Tensor input;
  VelocityCache vp;
  std::vector<Tensor> hist_fwd, hist_inv;
  StageFields fields;
  std::vector<BlockCache> blocks;
  Tensor output;
  Tensor down_pre;  // strided conv output
};

struct DecoderCache {
  Tensor cat;
  Tensor pre;
};

struct ForwardCache {
  std::size_t h = 0, w = 0;  // unpadded input extent
  Tensor padded;
  Tensor stem_pre;
  std::vector<StageCache> stages;
  std::vector<DecoderCache> decoder;  // index i is the decoder level producing stage i resolution
  Tensor head_in;
};

/// Tiny two-scale UNet-style MPT. Weights live in a ParamStore under stable
/// names (stem.w, s0.vp.w1, s0.b1.attn.wq, down0.w, dec0.w, head.w, ...).
class MPTNet {
 public:
  MPTNet(const MPTNetConfig& cfg, std::uint64_t seed);
  /// Adopts checkpointed weights; names and shapes must match the config.
  MPTNet(const MPTNetConfig& cfg, ParamStore store);

  const MPTNetConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }

  /// image [in_channels,H,W] -> logits [num_classes,H,W].
  Tensor forward(const Tensor& image, ForwardCache* cache = nullptr) const;

  /// Accumulates scale * d(loss)/d(param) into the store given d(loss)/d(logits).
  /// Returns the gradient w.r.t. the input image.
  Tensor backward(const ForwardCache& cache, const Tensor& d_logits, double scale = 1.0);

  /// Stage deformation fields (identity when the morph path is off).
  std::vector<DeformationField> deformation_fields(const Tensor& image) const;

 private:
  BlockParams block_params(std::size_t stage, std::size_t block) const;
  VelocityPredictor velocity_predictor(std::size_t stage) const;
  BlockOptions block_options(std::size_t block) const;
  static std::string block_prefix(std::size_t stage, std::size_t block);

  MPTNetConfig cfg_;
  ParamStore store_;
  std::vector<BlockParams> skeletons_;  // hyperparameters per block, values come from the store
};

// ---- configuration ----------------------------------------------------------

struct TrainConfig {
  MPTNetConfig net;
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double lr = 5e-5;
  std::uint64_t seed = 0;
};

/// Reads network and training keys; unknown keys are rejected.
TrainConfig train_config_from(const KeyValueConfig& cfg);
/// Round-trippable key = value text for every field.
std::string to_config_text(const TrainConfig& tc);

// ---- data, training, evaluation ---------------------------------------------

struct Sample {
  Tensor image;  // [C,H,W]
  SegMask mask;
};

/// Loads one split ("train" or "eval") listed in <dir>/manifest.txt.
std::vector<Sample> load_split(const std::string& dir, const std::string& split, std::size_t num_classes);

struct CaseScores {
  double dice = 0.0;  // mean over foreground classes
  double miou = 0.0;
  double cldice = 0.0;
};

CaseScores score_case(const SegMask& pred, const SegMask& gt);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& xs);

struct EvalSummary {
  MeanStd dice, miou, cldice;
  std::size_t cases = 0;
};
EvalSummary summarize(const std::vector<CaseScores>& cases);
EvalSummary evaluate(const MPTNet& net, const std::vector<Sample>& samples);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double dice = 0.0;
  double cldice = 0.0;
  double min_jacobian = 0.0;
};

inline constexpr const char* kTrainCsvHeader = "epoch,loss,dice,cldice,min_jacobian";
std::string format_epoch_row(const EpochLog& e);

/// Adam training with per-batch gradient averaging and a deterministic
/// per-epoch shuffle. Dice/clDice are measured on `eval` (on `train` when
/// `eval` is empty). Each epoch row is written to `csv` when given.
std::vector<EpochLog> train(MPTNet& net, const TrainConfig& tc, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& eval_set, std::ostream* csv = nullptr);

}  // namespace mpt
