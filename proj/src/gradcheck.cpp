#include "mpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "mpt/morphpatch.hpp"
#include "mpt/phantom.hpp"

namespace mpt {

namespace {

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}

  Tensor uniform(Shape s, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = d(gen);
    return t;
  }
  Tensor normal(Shape s, double stddev = 1.0) {
    std::normal_distribution<double> d(0.0, stddev);
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = d(gen);
    return t;
  }
};

// Scalar objective <proj, out() - out0> with out0 the output at the current
// inputs. Centering keeps the objective near zero so its own rounding does not
// swamp the difference quotient.
std::function<double()> projected(const Tensor& proj, const std::function<Tensor()>& out) {
  Tensor base = out();
  if (base.shape() != proj.shape()) throw ShapeError("gradcheck: projection shape mismatch");
  return [proj, base = std::move(base), out] {
    const Tensor y = out();
    long double s = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(proj[i]) * (y[i] - base[i]);
    return static_cast<double>(s);
  };
}

FdReport merge(FdReport a, const FdReport& b) {
  a.checked += b.checked;
  if (b.max_rel_err > a.max_rel_err) {
    const auto n = a.checked;
    a = b;
    a.checked = n;
  }
  return a;
}

using Check = std::function<FdReport(std::uint64_t, double)>;

FdReport check_gelu(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.uniform({3, 4, 5}, -3.0, 3.0);
  const Tensor proj = r.normal({3, 4, 5});
  const Tensor gx = gelu_backward(x, proj);
  return finite_diff_check(projected(proj, [&] { return gelu(x); }), {{"x", &x, &gx}}, eps);
}

FdReport check_matmul(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor a = r.normal({4, 5}), b = r.normal({5, 3});
  const Tensor proj = r.normal({4, 3});
  const auto g = matmul_backward(a, b, proj);
  return finite_diff_check(projected(proj, [&] { return matmul(a, b); }), {{"a", &a, &g.d_a}, {"b", &b, &g.d_b}}, eps);
}

FdReport check_softmax(std::uint64_t seed, double eps) {
  Rng r(seed);
  FdReport rep;
  for (int axis = 0; axis < 3; ++axis) {
    Tensor x = r.normal({3, 4, 5}, 2.0);
    const Tensor proj = r.normal({3, 4, 5});
    const Tensor gx = softmax_backward(softmax(x, axis), proj, axis);
    rep = merge(rep, finite_diff_check(projected(proj, [&] { return softmax(x, axis); }), {{"x", &x, &gx}}, eps));
  }
  return rep;
}

FdReport check_layer_norm(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.normal({6, 8}, 2.0), gamma = r.uniform({8}, 0.5, 1.5), beta = r.normal({8});
  const Tensor proj = r.normal({6, 8});
  LayerNormCache cache;
  layer_norm(x, gamma, beta, kLayerNormEps, &cache);
  const auto g = layer_norm_backward(cache, gamma, proj);
  return finite_diff_check(projected(proj, [&] { return layer_norm(x, gamma, beta); }),
                           {{"x", &x, &g.d_x}, {"gamma", &gamma, &g.d_gamma}, {"beta", &beta, &g.d_beta}}, eps);
}

FdReport check_conv2d(std::uint64_t seed, double eps) {
  Rng r(seed);
  FdReport rep;
  for (int stride = 1; stride <= 2; ++stride) {
    Tensor x = r.normal({2, 7, 6}), k = r.normal({3, 2, 3, 3}), b = r.normal({3});
    const Tensor proj = r.normal(conv2d(x, k, b, stride).shape());
    const auto g = conv2d_backward(x, k, proj, stride);
    rep = merge(rep, finite_diff_check(projected(proj, [&] { return conv2d(x, k, b, stride); }),
                                       {{"x", &x, &g.d_x}, {"kernel", &k, &g.d_kernel}, {"bias", &b, &g.d_bias}},
                                       eps));
  }
  return rep;
}

FdReport check_grid_sample(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.normal({2, 5, 6});
  Tensor coords({4, 3, 2});
  std::uniform_real_distribution<double> row(-0.6, 4.6), col(-0.6, 5.6);
  for (std::size_t i = 0; i < 12; ++i) {
    coords[2 * i] = row(r.gen);
    coords[2 * i + 1] = col(r.gen);
  }
  const Tensor proj = r.normal({2, 4, 3});
  const auto g = grid_sample_backward(x, coords, proj);
  return finite_diff_check(projected(proj, [&] { return grid_sample(x, coords); }),
                           {{"x", &x, &g.d_x}, {"coords", &coords, &g.d_coords}}, eps);
}

FdReport check_warp(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.normal({2, 6, 7}), off = r.uniform({2, 6, 7}, -1.5, 1.5);
  const Tensor proj = r.normal({2, 6, 7});
  const auto g = warp_backward(x, off, proj);
  return finite_diff_check(projected(proj, [&] { return warp(x, off); }),
                           {{"x", &x, &g.d_x}, {"offsets", &off, &g.d_coords}}, eps);
}

FdReport check_upsample(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.normal({2, 3, 4});
  const Tensor proj = r.normal({2, 6, 8});
  const Tensor gx = upsample_nearest2_backward(proj);
  return finite_diff_check(projected(proj, [&] { return upsample_nearest2(x); }), {{"x", &x, &gx}}, eps);
}

FdReport check_concat(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor a = r.normal({2, 3, 4}), b = r.normal({3, 3, 4});
  const Tensor proj = r.normal({5, 3, 4});
  const auto [ga, gb] = concat_channels_backward(proj, 2);
  return finite_diff_check(projected(proj, [&] { return concat_channels(a, b); }), {{"a", &a, &ga}, {"b", &b, &gb}}, eps);
}

FdReport check_compose(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor outer = r.uniform({2, 6, 6}, -1.2, 1.2), inner = r.uniform({2, 6, 6}, -1.2, 1.2);
  const Tensor proj = r.normal({2, 6, 6});
  const auto g = compose_backward(outer, inner, proj);
  auto f = projected(proj, [&] { return compose(DeformationField(outer), DeformationField(inner)).offsets(); });
  return finite_diff_check(f, {{"outer", &outer, &g.d_outer}, {"inner", &inner, &g.d_inner}}, eps);
}

FdReport check_exponentiate(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor v = r.uniform({2, 6, 6}, -1.0, 1.0);
  const Tensor proj = r.normal({2, 6, 6});
  constexpr int steps = 3;
  std::vector<Tensor> hist;
  exponentiate(VelocityField(v), steps, hist);
  const Tensor gv = exponentiate_backward(hist, proj);
  return finite_diff_check(projected(proj, [&] { return exponentiate(VelocityField(v), steps).offsets(); }),
                           {{"velocity", &v, &gv}}, eps);
}

FdReport check_deform_features(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor x = r.normal({3, 6, 6}), off = r.uniform({2, 6, 6}, -1.4, 1.4);
  const Tensor proj = r.normal({3, 6, 6});
  const auto g = deform_features_backward(x, DeformationField(off), proj);
  return finite_diff_check(projected(proj, [&] { return deform_features(x, DeformationField(off)); }),
                           {{"x", &x, &g.d_x}, {"offsets", &off, &g.d_coords}}, eps);
}

FdReport check_soft_assign(std::uint64_t seed, double eps) {
  Rng r(seed);
  ClusterState cs;
  Tensor f = r.normal({10, 4});
  cs.cores = r.normal({5, 4});
  cs.lambda = r.normal({5, 4});
  cs.mu = r.normal({5});
  const Tensor proj = r.normal({10, 5});
  const auto g = soft_assign_backward(f, cs.lambda, soft_assign(f, cs), proj);
  return finite_diff_check(projected(proj, [&] { return soft_assign(f, cs); }),
                           {{"features", &f, &g.d_features}, {"lambda", &cs.lambda, &g.d_lambda}, {"mu", &cs.mu, &g.d_mu}},
                           eps);
}

FdReport check_update_cores(std::uint64_t seed, double eps) {
  Rng r(seed);
  FdReport rep;
  for (auto mode : {CoreUpdate::verbatim, CoreUpdate::residual}) {
    Tensor f = r.normal({10, 4}), cores = r.normal({5, 4});
    Tensor assign = r.uniform({10, 5}, 0.05, 1.0);
    const Tensor proj = r.normal({5, 4});
    const auto g = update_cores_backward(f, cores, assign, mode, proj);
    rep = merge(rep, finite_diff_check(projected(proj, [&] { return update_cores(f, cores, assign, mode); }),
                                       {{"features", &f, &g.d_features},
                                        {"cores", &cores, &g.d_cores},
                                        {"assign", &assign, &g.d_assign}},
                                       eps));
  }
  // Residual mode with one cluster whose mass is below the clamp. The tiny
  // assignment column needs a step far below its own magnitude.
  Tensor f = r.normal({10, 4}), cores = r.normal({5, 4});
  Tensor assign = r.uniform({10, 5}, 0.05, 1.0);
  Tensor tail({10});
  for (std::size_t i = 0; i < 10; ++i) tail[i] = 1e-10 * static_cast<double>(i + 1);
  auto full = [&] {
    Tensor a = assign;
    for (std::size_t i = 0; i < 10; ++i) a(i, 4) = tail[i];
    return a;
  };
  const Tensor proj = r.normal({5, 4});
  const auto g = update_cores_backward(f, cores, full(), CoreUpdate::residual, proj);
  Tensor g_tail({10});
  for (std::size_t i = 0; i < 10; ++i) g_tail[i] = g.d_assign(i, 4);
  auto obj = projected(proj, [&] { return update_cores(f, cores, full(), CoreUpdate::residual); });
  rep = merge(rep, finite_diff_check(obj, {{"features", &f, &g.d_features}, {"cores", &cores, &g.d_cores}}, eps));
  rep = merge(rep, finite_diff_check(obj, {{"assign_tail", &tail, &g_tail}}, 1e-12));
  return rep;
}

FdReport check_sca(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor f = r.normal({8, 4}), cores = r.normal({4, 4});
  SCAParams p{r.normal({4, 4}, 0.8), r.normal({4, 4}, 0.8), r.normal({4, 4}, 0.5), 2};
  const Tensor proj = r.normal({8, 4});
  ScaCache cache;
  sca_forward(f, cores, p, &cache);
  const auto g = sca_backward(cache, p, proj);
  return finite_diff_check(projected(proj, [&] { return sca_forward(f, cores, p); }),
                           {{"features", &f, &g.d_features},
                            {"cores", &cores, &g.d_new_cores},
                            {"wq", &p.wq, &g.d_wq},
                            {"wk", &p.wk, &g.d_wk},
                            {"wv", &p.wv, &g.d_wv}},
                           eps);
}

FdReport check_window_attention(std::uint64_t seed, double eps) {
  Rng r(seed);
  MHAParams p;
  p.heads = 2;
  p.win_h = p.win_w = 2;
  p.wq = r.normal({4, 4}, 0.5);
  p.wk = r.normal({4, 4}, 0.5);
  p.wv = r.normal({4, 4}, 0.5);
  p.wo = r.normal({4, 4}, 0.5);
  p.bias_table = r.normal({9, 2}, 0.5);
  Tensor x = r.normal({2, 4, 4});
  const Tensor proj = r.normal({2, 4, 4});
  WindowAttentionCache cache;
  window_attention(x, p, &cache);
  const auto g = window_attention_backward(cache, p, proj);
  return finite_diff_check(projected(proj, [&] { return window_attention(x, p); }),
                           {{"windows", &x, &g.d_windows},
                            {"wq", &p.wq, &g.d_wq},
                            {"wk", &p.wk, &g.d_wk},
                            {"wv", &p.wv, &g.d_wv},
                            {"wo", &p.wo, &g.d_wo},
                            {"bias_table", &p.bias_table, &g.d_bias_table}},
                           eps);
}

FdReport check_block_variant(std::uint64_t seed, double eps, const BlockOptions& opt, bool morph) {
  Rng r(seed);
  constexpr std::size_t c = 4, h = 4, w = 4;
  BlockParams p = BlockParams::init(c, 2, 2, 3, 2, 1.0, r.gen);
  // Non-trivial LN affine terms so their gradients are exercised.
  p.for_each([&](const std::string& name, Tensor& t) {
    if (name.find(".b") != std::string::npos && name.rfind("ln", 0) == 0) t = r.normal(t.shape(), 0.1);
  });
  Tensor x = r.normal({c, h, w});
  Tensor off_f = r.uniform({2, h, w}, 0.15, 0.85), off_i = r.uniform({2, h, w}, -0.85, -0.15);
  const Tensor proj = r.normal({c, h, w});
  auto fields = [&] {
    if (!morph) return StageFields::none();
    return StageFields{DeformationField(off_f), DeformationField(off_i), false};
  };
  BlockCache cache;
  mpt_block(x, fields(), p, opt, &cache);
  auto g = mpt_block_backward(cache, proj, fields(), p, opt);

  std::map<std::string, Tensor*> analytic;
  g.params.for_each([&](const std::string& name, Tensor& t) { analytic[name] = &t; });
  std::vector<FdTarget> targets{{"x", &x, &g.d_x}};
  if (morph) {
    targets.push_back({"phi", &off_f, &g.d_phi});
    targets.push_back({"phi_inv", &off_i, &g.d_phi_inv});
  }
  p.for_each([&](const std::string& name, Tensor& t) { targets.push_back({name, &t, analytic.at(name)}); });
  return finite_diff_check(projected(proj, [&] { return mpt_block(x, fields(), p, opt); }), targets, 10.0 * eps, 200, seed,
                           FdStencil::central4);
}

FdReport check_block(std::uint64_t seed, double eps) {
  FdReport rep;
  BlockOptions a;  // unshifted, sequential, SCA on
  BlockOptions b;
  b.shifted = true;
  b.fusion = Fusion::parallel_sum;
  BlockOptions c;
  c.shifted = true;
  c.use_sca = false;
  BlockOptions d;
  d.core_mode = CoreUpdate::verbatim;
  rep = merge(rep, check_block_variant(seed, eps, a, true));
  rep = merge(rep, check_block_variant(seed + 1, eps, b, true));
  rep = merge(rep, check_block_variant(seed + 2, eps, c, false));
  rep = merge(rep, check_block_variant(seed + 3, eps, d, true));
  return rep;
}

FdReport check_velocity(std::uint64_t seed, double eps) {
  Rng r(seed);
  VelocityPredictor vp = VelocityPredictor::init(2, 1.0, r.gen);
  vp.w2 = r.normal(vp.w2.shape(), 0.3);
  vp.b2 = r.normal({2}, 0.2);
  Tensor x = r.normal({2, 5, 5});
  const Tensor proj = r.normal({2, 5, 5});
  VelocityCache cache;
  predict_velocity(x, vp, &cache);
  const auto g = predict_velocity_backward(cache, vp, proj);
  return finite_diff_check(projected(proj, [&] { return predict_velocity(x, vp).tensor(); }),
                           {{"x", &x, &g.d_x},
                            {"w1", &vp.w1, &g.d_w1},
                            {"b1", &vp.b1, &g.d_b1},
                            {"w2", &vp.w2, &g.d_w2},
                            {"b2", &vp.b2, &g.d_b2}},
                           eps);
}

FdReport check_dice_loss(std::uint64_t seed, double eps) {
  Rng r(seed);
  Tensor logits = r.normal({3, 4, 4}, 0.5);
  Tensor labels({4, 4});
  std::uniform_int_distribution<int> cls(0, 2);
  for (auto& v : labels.data()) v = cls(r.gen);
  const SegMask target(labels, 3);
  const Tensor g = dice_loss_backward(logits, target);
  return finite_diff_check([&] { return dice_loss(logits, target); }, {{"logits", &logits, &g}}, eps);
}

const std::vector<std::pair<std::string, Check>>& registry() {
  static const std::vector<std::pair<std::string, Check>> r = {
      {"gelu", check_gelu},
      {"matmul", check_matmul},
      {"softmax", check_softmax},
      {"layer_norm", check_layer_norm},
      {"conv2d", check_conv2d},
      {"grid_sample", check_grid_sample},
      {"warp", check_warp},
      {"upsample", check_upsample},
      {"concat", check_concat},
      {"compose", check_compose},
      {"exponentiate", check_exponentiate},
      {"deform_features", check_deform_features},
      {"soft_assign", check_soft_assign},
      {"update_cores", check_update_cores},
      {"sca", check_sca},
      {"window_attention", check_window_attention},
      {"block", check_block},
      {"velocity", check_velocity},
      {"dice_loss", check_dice_loss},
  };
  return r;
}

}  // namespace

const std::vector<std::string>& gradcheck_kernels() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : registry()) n.push_back(name);
    return n;
  }();
  return names;
}

FdReport check_kernel(const std::string& name, std::uint64_t seed, double eps) {
  for (const auto& [n, fn] : registry()) {
    if (n == name) return fn(seed, eps);
  }
  std::string known;
  for (const auto& n : gradcheck_kernels()) known += (known.empty() ? "" : ", ") + n;
  throw ArgumentError("unknown kernel '" + name + "' (known: " + known + ")");
}

MPTNetConfig gradcheck_network_config() { return MPTNetConfig{}; }

FdReport check_network(const MPTNetConfig& cfg, std::uint64_t seed, double eps, std::size_t max_coords) {
  MPTNet net(cfg, seed);
  Rng r(seed ^ 0xabcdefULL);
  auto& store = net.params();
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    const std::string sp = "s" + std::to_string(s) + ".vp.";
    Tensor& b2 = store.value(sp + "b2");
    b2[0] = 0.45;
    b2[1] = -0.35;
  }
  for (auto& e : store.entries()) {
    const bool ln_bias = e.name.find(".ln") != std::string::npos && e.name.back() == 'b';
    if (ln_bias || e.name.ends_with(".mlp.b1") || e.name.ends_with(".mlp.b2")) {
      e.value = r.normal(e.value.shape(), 0.1);
    }
  }

  constexpr std::size_t n = 16;
  metrics::BinaryImage fg(n, n);
  phantom::render_tube(fg, {{2.0, 1.0}, {7.0, 8.0}, {13.0, 14.0}}, 1.5);
  Tensor image = r.normal({cfg.in_channels, n, n}, 0.2);
  Tensor labels({n, n});
  for (std::size_t k = 0; k < n * n; ++k) {
    labels[k] = fg.px[k];
    image[k] += fg.px[k];
  }
  const SegMask target(labels, cfg.num_classes);

  store.zero_grad();
  ForwardCache cache;
  const Tensor logits = net.forward(image, &cache);
  net.backward(cache, dice_loss_backward(logits, target));
  return finite_diff_check([&] { return dice_loss(net.forward(image), target); }, store, eps, max_coords, seed,
                           FdStencil::central4);
}

}  // namespace mpt
