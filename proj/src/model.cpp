#include "mpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "mpt/morphpatch.hpp"
#include "mpt/phantom.hpp"

namespace mpt {

namespace {

Tensor normal_tensor(Shape s, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor conv_weight(std::size_t cout, std::size_t cin, std::size_t k, std::mt19937_64& rng) {
  return normal_tensor({cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k)), rng);
}

// Zero-pads [C,H,W] at the bottom/right.
Tensor pad_to(const Tensor& x, std::size_t hp, std::size_t wp) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == hp && w == wp) return x;
  Tensor out({c, hp, wp});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x.ptr() + (ch * h + i) * w, w, out.ptr() + (ch * hp + i) * wp);
  return out;
}

Tensor crop_to(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.dim(0), hp = x.dim(1), wp = x.dim(2);
  if (h == hp && w == wp) return x;
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x.ptr() + (ch * hp + i) * wp, w, out.ptr() + (ch * h + i) * w);
  return out;
}

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

// g(u) = tanh(u)/u and g'(u)/u, with series near zero.
struct SatCoeffs {
  double g, dg_over_u;
};

SatCoeffs sat_coeffs(double u) {
  if (u < 1e-3) {
    const double u2 = u * u;
    return {1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0, -2.0 / 3.0 + 8.0 * u2 / 15.0};
  }
  const double t = std::tanh(u);
  return {t / u, ((1.0 - t * t) * u - t) / (u * u * u)};
}

}  // namespace

// ---- velocity predictor -----------------------------------------------------

VelocityPredictor VelocityPredictor::init(std::size_t channels, double v_max, std::mt19937_64& rng) {
  VelocityPredictor vp;
  vp.w1 = conv_weight(kHidden, channels, 3, rng);
  vp.b1 = Tensor({kHidden});
  vp.w2 = normal_tensor({2, kHidden, 3, 3}, 0.01, rng);
  vp.b2 = Tensor({2});
  vp.v_max = v_max;
  return vp;
}

Tensor saturate_velocity(const Tensor& z, double v_max) {
  if (z.rank() != 3 || z.dim(0) != 2) throw ShapeError("saturate_velocity: expected [2,H,W], got " + shape_str(z.shape()));
  if (!(v_max > 0.0)) throw ArgumentError("saturate_velocity: v_max must be positive");
  const std::size_t n = z.dim(1) * z.dim(2);
  Tensor v(z.shape());
  for (std::size_t k = 0; k < n; ++k) {
    const double a = z[k], b = z[n + k];
    const double r = std::hypot(a, b);
    const double g = sat_coeffs(r / v_max).g;
    double va = g * a, vb = g * b;
    // Rounding can put |v| an ulp above v_max once tanh saturates.
    if (const double m = std::hypot(va, vb); m > v_max) {
      va *= v_max / m;
      vb *= v_max / m;
    }
    v[k] = va;
    v[n + k] = vb;
  }
  return v;
}

Tensor saturate_velocity_backward(const Tensor& z, double v_max, const Tensor& d_v) {
  if (d_v.shape() != z.shape()) throw ShapeError("saturate_velocity_backward: shape mismatch");
  const std::size_t n = z.dim(1) * z.dim(2);
  Tensor dz(z.shape());
  const double inv_v2 = 1.0 / (v_max * v_max);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = z[k], b = z[n + k];
    const auto c = sat_coeffs(std::hypot(a, b) / v_max);
    const double coef = c.dg_over_u * inv_v2 * (a * d_v[k] + b * d_v[n + k]);
    dz[k] = c.g * d_v[k] + coef * a;
    dz[n + k] = c.g * d_v[n + k] + coef * b;
  }
  return dz;
}

VelocityField predict_velocity(const Tensor& x, const VelocityPredictor& vp, VelocityCache* cache) {
  Tensor pre = conv2d(x, vp.w1, vp.b1);
  Tensor hid = gelu(pre);
  Tensor raw = conv2d(hid, vp.w2, vp.b2);
  VelocityField v(saturate_velocity(raw, vp.v_max), vp.v_max);
  if (cache) {
    cache->input = x;
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(hid);
    cache->raw = std::move(raw);
  }
  return v;
}

VelocityGrads predict_velocity_backward(const VelocityCache& cache, const VelocityPredictor& vp, const Tensor& d_v) {
  VelocityGrads g;
  const Tensor d_raw = saturate_velocity_backward(cache.raw, vp.v_max, d_v);
  auto c2 = conv2d_backward(cache.hidden, vp.w2, d_raw);
  g.d_w2 = std::move(c2.d_kernel);
  g.d_b2 = std::move(c2.d_bias);
  const Tensor d_pre = gelu_backward(cache.hidden_pre, c2.d_x);
  auto c1 = conv2d_backward(cache.input, vp.w1, d_pre);
  g.d_w1 = std::move(c1.d_kernel);
  g.d_b1 = std::move(c1.d_bias);
  g.d_x = std::move(c1.d_x);
  return g;
}

// ---- loss -------------------------------------------------------------------

namespace {

struct DiceTerms {
  Tensor p;
  std::vector<double> inter, psum, tsum;
};

DiceTerms dice_terms(const Tensor& logits, const SegMask& target) {
  if (logits.rank() != 3) throw ShapeError("dice_loss: logits must be [K,H,W], got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  if (target.height() != h || target.width() != w) {
    throw ShapeError("dice_loss: target " + shape_str(target.labels().shape()) + " does not match logits " +
                     shape_str(logits.shape()));
  }
  DiceTerms d{softmax(logits, 0), std::vector<double>(k), std::vector<double>(k), std::vector<double>(k)};
  const std::size_t n = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const auto lab = static_cast<std::size_t>(target.labels()[i]);
    if (lab >= k) throw ArgumentError("dice_loss: label " + std::to_string(lab) + " >= num_classes " + std::to_string(k));
    d.tsum[lab] += 1.0;
    d.inter[lab] += d.p[lab * n + i];
  }
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += d.p[c * n + i];
    d.psum[c] = s;
  }
  return d;
}

}  // namespace

double dice_loss(const Tensor& logits, const SegMask& target, double smooth) {
  const auto d = dice_terms(logits, target);
  const std::size_t k = d.inter.size();
  double acc = 0.0;
  for (std::size_t c = 0; c < k; ++c) acc += (2.0 * d.inter[c] + smooth) / (d.psum[c] + d.tsum[c] + smooth);
  return 1.0 - acc / static_cast<double>(k);
}

Tensor dice_loss_backward(const Tensor& logits, const SegMask& target, double smooth) {
  const auto d = dice_terms(logits, target);
  const std::size_t k = d.inter.size(), n = logits.dim(1) * logits.dim(2);
  Tensor dp(logits.shape());
  for (std::size_t c = 0; c < k; ++c) {
    const double den = d.psum[c] + d.tsum[c] + smooth;
    const double num = 2.0 * d.inter[c] + smooth;
    const double a = -1.0 / (static_cast<double>(k) * den * den);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<std::size_t>(target.labels()[i]) == c ? 1.0 : 0.0;
      dp[c * n + i] = a * (2.0 * t * den - num);
    }
  }
  return softmax_backward(d.p, dp, 0);
}

SegMask predict_labels(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("predict_labels: logits must be [K,H,W]");
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2), n = h * w;
  Tensor labels({h, w});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[c * n + i] > logits[best * n + i]) best = c;
    labels[i] = static_cast<double>(best);
  }
  return SegMask(std::move(labels), k);
}

// ---- network ----------------------------------------------------------------

void MPTNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw ArgumentError("MPTNetConfig: " + m); };
  if (in_channels == 0 || base_channels == 0) fail("channel counts must be positive");
  if (stages == 0 || stages > 4) fail("stages must lie in [1,4]");
  if (blocks == 0) fail("blocks must be >= 1");
  if (n_clusters == 0) fail("n_clusters must be >= 1");
  if (window == 0) fail("window must be >= 1");
  if (n_squaring < 0) fail("n_squaring must be >= 0");
  if (!(v_max > 0.0)) fail("v_max must be positive");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (!(beta > 0.0)) fail("beta must be positive");
  if (heads == 0 || base_channels % heads != 0) fail("heads must divide base_channels");
  if (sca_heads == 0 || base_channels % sca_heads != 0) fail("sca_heads must divide base_channels");
}

std::string MPTNet::block_prefix(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage) + ".b" + std::to_string(block) + ".";
}

MPTNet::MPTNet(const MPTNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c0 = cfg_.channels(0);
  store_.add("stem.w", conv_weight(c0, cfg_.in_channels, 3, rng));
  store_.add("stem.b", Tensor({c0}));
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    const std::size_t c = cfg_.channels(s);
    const std::string sp = "s" + std::to_string(s) + ".";
    auto vp = VelocityPredictor::init(c, cfg_.v_max, rng);
    store_.add(sp + "vp.w1", std::move(vp.w1));
    store_.add(sp + "vp.b1", std::move(vp.b1));
    store_.add(sp + "vp.w2", std::move(vp.w2));
    store_.add(sp + "vp.b2", std::move(vp.b2));
    for (std::size_t b = 0; b < 2 * cfg_.blocks; ++b) {
      auto bp = BlockParams::init(c, cfg_.heads, cfg_.window, cfg_.n_clusters, cfg_.sca_heads, cfg_.beta, rng);
      const std::string prefix = block_prefix(s, b);
      bp.for_each([&](const std::string& name, Tensor& t) { store_.add(prefix + name, t); });
      skeletons_.push_back(std::move(bp));
    }
    if (s + 1 < cfg_.stages) {
      const std::string dp = "down" + std::to_string(s) + ".";
      store_.add(dp + "w", conv_weight(cfg_.channels(s + 1), c, 3, rng));
      store_.add(dp + "b", Tensor({cfg_.channels(s + 1)}));
    }
  }
  for (std::size_t s = cfg_.stages - 1; s-- > 0;) {
    const std::string dp = "dec" + std::to_string(s) + ".";
    const std::size_t c = cfg_.channels(s);
    store_.add(dp + "w", conv_weight(c, c + cfg_.channels(s + 1), 3, rng));
    store_.add(dp + "b", Tensor({c}));
  }
  store_.add("head.w", conv_weight(cfg_.num_classes, c0, 1, rng));
  store_.add("head.b", Tensor({cfg_.num_classes}));
}

MPTNet::MPTNet(const MPTNetConfig& cfg, ParamStore store) : MPTNet(cfg, 0) {
  if (store.entries().size() != store_.entries().size()) {
    throw FormatError("checkpoint holds " + std::to_string(store.entries().size()) + " tensors, network expects " +
                      std::to_string(store_.entries().size()));
  }
  for (auto& e : store_.entries()) {
    if (!store.contains(e.name)) throw FormatError("checkpoint lacks tensor '" + e.name + "'");
    const Tensor& v = store.value(e.name);
    if (v.shape() != e.value.shape()) {
      throw FormatError("checkpoint tensor '" + e.name + "' has shape " + shape_str(v.shape()) + ", expected " +
                        shape_str(e.value.shape()));
    }
    e.value = v;
  }
}

BlockParams MPTNet::block_params(std::size_t stage, std::size_t block) const {
  BlockParams p = skeletons_[stage * 2 * cfg_.blocks + block];
  const std::string prefix = block_prefix(stage, block);
  p.for_each([&](const std::string& name, Tensor& t) { t = store_.value(prefix + name); });
  return p;
}

VelocityPredictor MPTNet::velocity_predictor(std::size_t stage) const {
  const std::string sp = "s" + std::to_string(stage) + ".vp.";
  VelocityPredictor vp;
  vp.w1 = store_.value(sp + "w1");
  vp.b1 = store_.value(sp + "b1");
  vp.w2 = store_.value(sp + "w2");
  vp.b2 = store_.value(sp + "b2");
  vp.v_max = cfg_.v_max;
  return vp;
}

BlockOptions MPTNet::block_options(std::size_t block) const {
  BlockOptions o;
  o.shifted = block % 2 == 1;
  o.use_sca = cfg_.use_sca;
  o.fusion = cfg_.fusion;
  o.core_mode = cfg_.core_mode;
  return o;
}

Tensor MPTNet::forward(const Tensor& image, ForwardCache* cache) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.in_channels) {
    throw ShapeError("MPTNet::forward: expected [" + std::to_string(cfg_.in_channels) + ",H,W], got " +
                     shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), m = cfg_.pad_multiple();
  Tensor x = pad_to(image, round_up(h, m), round_up(w, m));
  Tensor stem_pre = conv2d(x, store_.value("stem.w"), store_.value("stem.b"));
  Tensor cur = gelu(stem_pre);
  if (cache) {
    *cache = ForwardCache{};
    cache->h = h;
    cache->w = w;
    cache->padded = std::move(x);
    cache->stem_pre = std::move(stem_pre);
    cache->stages.resize(cfg_.stages);
    cache->decoder.resize(cfg_.stages - 1);
  }

  std::vector<Tensor> skips(cfg_.stages);
  for (std::size_t s = 0; s < cfg_.stages; ++s) {
    StageCache* sc = cache ? &cache->stages[s] : nullptr;
    if (sc) sc->input = cur;
    StageFields fields = StageFields::none();
    if (cfg_.use_mp) {
      const auto v = predict_velocity(cur, velocity_predictor(s), sc ? &sc->vp : nullptr);
      std::vector<Tensor> hf, hi;
      fields.forward = exponentiate(v, cfg_.n_squaring, hf);
      fields.inverse = exponentiate(v.negated(), cfg_.n_squaring, hi);
      fields.identity = false;
      if (sc) {
        sc->hist_fwd = std::move(hf);
        sc->hist_inv = std::move(hi);
      }
    }
    if (sc) sc->blocks.resize(2 * cfg_.blocks);
    for (std::size_t b = 0; b < 2 * cfg_.blocks; ++b) {
      cur = mpt_block(cur, fields, block_params(s, b), block_options(b), sc ? &sc->blocks[b] : nullptr);
    }
    if (sc) {
      sc->fields = std::move(fields);
      sc->output = cur;
    }
    skips[s] = cur;
    if (s + 1 < cfg_.stages) {
      const std::string dp = "down" + std::to_string(s) + ".";
      cur = conv2d(cur, store_.value(dp + "w"), store_.value(dp + "b"), 2);
      if (sc) sc->down_pre = cur;
    }
  }

  for (std::size_t s = cfg_.stages - 1; s-- > 0;) {
    const std::string dp = "dec" + std::to_string(s) + ".";
    Tensor cat = concat_channels(upsample_nearest2(cur), skips[s]);
    Tensor pre = conv2d(cat, store_.value(dp + "w"), store_.value(dp + "b"));
    cur = gelu(pre);
    if (cache) {
      cache->decoder[s].cat = std::move(cat);
      cache->decoder[s].pre = std::move(pre);
    }
  }
  Tensor logits = conv2d(cur, store_.value("head.w"), store_.value("head.b"));
  if (cache) cache->head_in = std::move(cur);
  return crop_to(logits, h, w);
}

Tensor MPTNet::backward(const ForwardCache& cache, const Tensor& d_logits, double scale) {
  if (cache.stages.size() != cfg_.stages) throw ArgumentError("MPTNet::backward: cache was not captured");
  if (d_logits.shape() != Shape{cfg_.num_classes, cache.h, cache.w}) {
    throw ShapeError("MPTNet::backward: upstream gradient has shape " + shape_str(d_logits.shape()));
  }
  const std::size_t hp = cache.padded.dim(1), wp = cache.padded.dim(2);
  auto acc = [&](const std::string& name, const Tensor& g) {
    if (g.size() != 0) store_.accumulate(name, g, scale);
  };

  auto hb = conv2d_backward(cache.head_in, store_.value("head.w"), pad_to(d_logits, hp, wp));
  acc("head.w", hb.d_kernel);
  acc("head.b", hb.d_bias);
  Tensor d = std::move(hb.d_x);

  std::vector<Tensor> d_skip(cfg_.stages);
  for (std::size_t s = 0; s + 1 < cfg_.stages; ++s) {
    const std::string dp = "dec" + std::to_string(s) + ".";
    const auto& dc = cache.decoder[s];
    const Tensor d_pre = gelu_backward(dc.pre, d);
    auto cb = conv2d_backward(dc.cat, store_.value(dp + "w"), d_pre);
    acc(dp + "w", cb.d_kernel);
    acc(dp + "b", cb.d_bias);
    auto [d_up, d_sk] = concat_channels_backward(cb.d_x, cfg_.channels(s + 1));
    d_skip[s] = std::move(d_sk);
    d = upsample_nearest2_backward(d_up);
  }

  // d now holds the gradient of the deepest stage output.
  for (std::size_t s = cfg_.stages; s-- > 0;) {
    const auto& sc = cache.stages[s];
    if (s + 1 < cfg_.stages) {
      const std::string dp = "down" + std::to_string(s) + ".";
      auto db = conv2d_backward(sc.output, store_.value(dp + "w"), d, 2);
      acc(dp + "w", db.d_kernel);
      acc(dp + "b", db.d_bias);
      d = add(db.d_x, d_skip[s]);
    }
    const bool mp = !sc.fields.identity;
    Tensor d_phi, d_phi_inv;
    if (mp) {
      d_phi = Tensor(sc.fields.forward.offsets().shape());
      d_phi_inv = Tensor(sc.fields.inverse.offsets().shape());
    }
    for (std::size_t b = 2 * cfg_.blocks; b-- > 0;) {
      const BlockParams bp = block_params(s, b);
      auto g = mpt_block_backward(sc.blocks[b], d, sc.fields, bp, block_options(b));
      const std::string prefix = block_prefix(s, b);
      g.params.for_each([&](const std::string& name, Tensor& t) { acc(prefix + name, t); });
      d = std::move(g.d_x);
      if (mp) {
        axpy(d_phi, g.d_phi);
        axpy(d_phi_inv, g.d_phi_inv);
      }
    }
    if (mp) {
      Tensor d_v = exponentiate_backward(sc.hist_fwd, d_phi);
      axpy(d_v, exponentiate_backward(sc.hist_inv, d_phi_inv), -1.0);
      const auto vp = velocity_predictor(s);
      auto vg = predict_velocity_backward(sc.vp, vp, d_v);
      const std::string sp = "s" + std::to_string(s) + ".vp.";
      acc(sp + "w1", vg.d_w1);
      acc(sp + "b1", vg.d_b1);
      acc(sp + "w2", vg.d_w2);
      acc(sp + "b2", vg.d_b2);
      axpy(d, vg.d_x);
    }
  }

  const Tensor d_stem = gelu_backward(cache.stem_pre, d);
  auto sb = conv2d_backward(cache.padded, store_.value("stem.w"), d_stem);
  acc("stem.w", sb.d_kernel);
  acc("stem.b", sb.d_bias);
  return crop_to(sb.d_x, cache.h, cache.w);
}

std::vector<DeformationField> MPTNet::deformation_fields(const Tensor& image) const {
  ForwardCache c;
  forward(image, &c);
  std::vector<DeformationField> out;
  for (const auto& sc : c.stages) {
    if (sc.fields.identity) {
      const auto& in = sc.input;
      out.push_back(DeformationField::identity(in.dim(1), in.dim(2)));
    } else {
      out.push_back(sc.fields.forward);
    }
  }
  return out;
}

// ---- configuration ----------------------------------------------------------

namespace {

Fusion parse_fusion(const std::string& s) {
  if (s == "sequential") return Fusion::sequential;
  if (s == "parallel-sum" || s == "parallel_sum") return Fusion::parallel_sum;
  throw ArgumentError("fusion must be sequential or parallel-sum, got '" + s + "'");
}

CoreUpdate parse_core_mode(const std::string& s) {
  if (s == "residual") return CoreUpdate::residual;
  if (s == "verbatim") return CoreUpdate::verbatim;
  throw ArgumentError("core_mode must be residual or verbatim, got '" + s + "'");
}

std::size_t positive(const KeyValueConfig& cfg, const char* key, std::size_t fallback) {
  const long v = cfg.get_int(key, static_cast<long>(fallback));
  if (v < 0) throw ArgumentError(std::string("config key '") + key + "' must be >= 0");
  return static_cast<std::size_t>(v);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

TrainConfig train_config_from(const KeyValueConfig& cfg) {
  cfg.require_known({"in_channels", "base_channels", "stages", "blocks", "n_clusters", "window", "n_squaring",
                     "v_max", "num_classes", "heads", "sca_heads", "beta", "fusion", "core_mode", "use_mp",
                     "use_sca", "epochs", "batch_size", "lr", "seed"});
  TrainConfig tc;
  auto& n = tc.net;
  n.in_channels = positive(cfg, "in_channels", n.in_channels);
  n.base_channels = positive(cfg, "base_channels", n.base_channels);
  n.stages = positive(cfg, "stages", n.stages);
  n.blocks = positive(cfg, "blocks", n.blocks);
  n.n_clusters = positive(cfg, "n_clusters", n.n_clusters);
  n.window = positive(cfg, "window", n.window);
  n.n_squaring = static_cast<int>(cfg.get_int("n_squaring", n.n_squaring));
  n.v_max = cfg.get_double("v_max", n.v_max);
  n.num_classes = positive(cfg, "num_classes", n.num_classes);
  n.heads = positive(cfg, "heads", n.heads);
  n.sca_heads = positive(cfg, "sca_heads", n.sca_heads);
  n.beta = cfg.get_double("beta", n.beta);
  n.fusion = parse_fusion(cfg.get_string("fusion", "sequential"));
  n.core_mode = parse_core_mode(cfg.get_string("core_mode", "residual"));
  n.use_mp = cfg.get_bool("use_mp", n.use_mp);
  n.use_sca = cfg.get_bool("use_sca", n.use_sca);
  tc.epochs = positive(cfg, "epochs", tc.epochs);
  tc.batch_size = positive(cfg, "batch_size", tc.batch_size);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.seed = positive(cfg, "seed", static_cast<std::size_t>(tc.seed));
  n.validate();
  if (tc.batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  if (!(tc.lr > 0.0)) throw ArgumentError("lr must be positive");
  return tc;
}

std::string to_config_text(const TrainConfig& tc) {
  const auto& n = tc.net;
  std::ostringstream os;
  os << "in_channels = " << n.in_channels << "\n"
     << "base_channels = " << n.base_channels << "\n"
     << "stages = " << n.stages << "\n"
     << "blocks = " << n.blocks << "\n"
     << "n_clusters = " << n.n_clusters << "\n"
     << "window = " << n.window << "\n"
     << "n_squaring = " << n.n_squaring << "\n"
     << "v_max = " << num(n.v_max) << "\n"
     << "num_classes = " << n.num_classes << "\n"
     << "heads = " << n.heads << "\n"
     << "sca_heads = " << n.sca_heads << "\n"
     << "beta = " << num(n.beta) << "\n"
     << "fusion = " << (n.fusion == Fusion::sequential ? "sequential" : "parallel-sum") << "\n"
     << "core_mode = " << (n.core_mode == CoreUpdate::residual ? "residual" : "verbatim") << "\n"
     << "use_mp = " << (n.use_mp ? "true" : "false") << "\n"
     << "use_sca = " << (n.use_sca ? "true" : "false") << "\n"
     << "epochs = " << tc.epochs << "\n"
     << "batch_size = " << tc.batch_size << "\n"
     << "lr = " << num(tc.lr) << "\n"
     << "seed = " << tc.seed << "\n";
  return os.str();
}

// ---- data, training, evaluation ---------------------------------------------

std::vector<Sample> load_split(const std::string& dir, const std::string& split, std::size_t num_classes) {
  const std::filesystem::path root(dir);
  std::vector<Sample> out;
  for (const auto& e : phantom::read_manifest(dir)) {
    if (e.split != split) continue;
    Tensor img = load_mtk((root / e.image).string());
    if (img.rank() == 2) img = img.reshaped({1, img.dim(0), img.dim(1)});
    if (img.rank() != 3) throw FormatError("'" + e.image + "' is not an image tensor");
    Tensor lab = load_mtk((root / e.mask).string());
    if (lab.rank() == 3 && lab.dim(0) == 1) lab = lab.reshaped({lab.dim(1), lab.dim(2)});
    if (lab.rank() != 2 || lab.dim(0) != img.dim(1) || lab.dim(1) != img.dim(2)) {
      throw FormatError("mask '" + e.mask + "' does not match image '" + e.image + "'");
    }
    out.push_back({std::move(img), SegMask(std::move(lab), num_classes)});
  }
  return out;
}

CaseScores score_case(const SegMask& pred, const SegMask& gt) {
  const std::size_t k = std::max(pred.num_classes(), gt.num_classes());
  if (k < 2) throw ArgumentError("score_case: need at least one foreground class");
  CaseScores s;
  for (std::size_t c = 1; c < k; ++c) s.dice += metrics::dice(pred, gt, static_cast<int>(c));
  s.dice /= static_cast<double>(k - 1);
  s.miou = metrics::miou(pred, gt);
  s.cldice = metrics::cl_dice(pred, gt);
  return s;
}

MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / n)};
}

EvalSummary summarize(const std::vector<CaseScores>& cases) {
  std::vector<double> d, m, c;
  for (const auto& s : cases) {
    d.push_back(s.dice);
    m.push_back(s.miou);
    c.push_back(s.cldice);
  }
  return {mean_std(d), mean_std(m), mean_std(c), cases.size()};
}

EvalSummary evaluate(const MPTNet& net, const std::vector<Sample>& samples) {
  std::vector<CaseScores> cases;
  cases.reserve(samples.size());
  for (const auto& s : samples) cases.push_back(score_case(predict_labels(net.forward(s.image)), s.mask));
  return summarize(cases);
}

std::string format_epoch_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f", e.epoch, e.loss, e.dice, e.cldice, e.min_jacobian);
  return buf;
}

std::vector<EpochLog> train(MPTNet& net, const TrainConfig& tc, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& eval_set, std::ostream* csv) {
  if (train_set.empty()) throw ArgumentError("train: empty training set");
  if (tc.batch_size == 0) throw ArgumentError("train: batch_size must be >= 1");
  std::mt19937_64 rng(tc.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const AdamOptions adam{tc.lr};
  auto& store = net.params();
  store.zero_grad();
  const auto& scored = eval_set.empty() ? train_set : eval_set;

  if (csv) *csv << kTrainCsvHeader << "\n";
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double loss_sum = 0.0;
    double min_jac = std::numeric_limits<double>::infinity();
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = train_set[order[k]];
        ForwardCache cache;
        const Tensor logits = net.forward(s.image, &cache);
        loss_sum += dice_loss(logits, s.mask);
        net.backward(cache, dice_loss_backward(logits, s.mask), inv_b);
        for (const auto& sc : cache.stages) {
          if (sc.fields.identity) continue;
          min_jac = std::min({min_jac, min_interior_jacobian(sc.fields.forward),
                              min_interior_jacobian(sc.fields.inverse)});
        }
      }
      adam_step(store, adam);
    }
    const auto summary = evaluate(net, scored);
    EpochLog e{epoch, loss_sum / static_cast<double>(order.size()), summary.dice.mean, summary.cldice.mean,
               std::isfinite(min_jac) ? min_jac : 1.0};
    if (csv) *csv << format_epoch_row(e) << "\n" << std::flush;
    logs.push_back(e);
  }
  return logs;
}

}  // namespace mpt
