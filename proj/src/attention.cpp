#include "mpt/attention.hpp"

#include <algorithm>
#include <cmath>

#include "mpt/grad.hpp"
#include "mpt/morphpatch.hpp"

namespace mpt {

std::size_t relative_bias_index(std::size_t a, std::size_t b, std::size_t win_h, std::size_t win_w) {
  const auto ra = static_cast<long>(a / win_w), ca = static_cast<long>(a % win_w);
  const auto rb = static_cast<long>(b / win_w), cb = static_cast<long>(b % win_w);
  const long span_w = 2 * static_cast<long>(win_w) - 1;
  return static_cast<std::size_t>((ra - rb + static_cast<long>(win_h) - 1) * span_w + (ca - cb) +
                                  static_cast<long>(win_w) - 1);
}

namespace {

void check_mha(const Tensor& windows, const MHAParams& p) {
  if (windows.rank() != 3) throw ShapeError("window_attention: expected [N_win, L, C]");
  const std::size_t l = windows.dim(1), c = windows.dim(2);
  if (l != p.win_h * p.win_w) {
    throw ShapeError("window_attention: token count " + std::to_string(l) + " != window area " +
                     std::to_string(p.win_h * p.win_w));
  }
  for (const Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    if (t->shape() != Shape{c, c}) throw ShapeError("window_attention: projections must be [C,C]");
  }
  if (p.heads == 0 || c % p.heads) throw ShapeError("window_attention: channels not divisible by heads");
  const std::size_t nb = (2 * p.win_h - 1) * (2 * p.win_w - 1);
  if (p.bias_table.shape() != Shape{nb, p.heads}) throw ShapeError("window_attention: bias table shape");
}

void softmax_row(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, row[k]);
  double z = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    row[k] = std::exp(row[k] - mx);
    z += row[k];
  }
  for (std::size_t k = 0; k < n; ++k) row[k] /= z;
}

std::vector<double> column_sums(const Tensor& t) {
  std::vector<double> s(t.dim(1), 0.0);
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) s[j] += t(i, j);
  return s;
}

void add_row_bias(Tensor& t, const Tensor& b) {
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) t(i, j) += b[j];
}

}  // namespace

Tensor window_attention(const Tensor& windows, const MHAParams& p, WindowAttentionCache* cache) {
  check_mha(windows, p);
  const std::size_t nw = windows.dim(0), l = windows.dim(1), c = windows.dim(2);
  const std::size_t dh = c / p.heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor x = windows.reshaped({nw * l, c});
  Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  Tensor merged({nw * l, c});
  Tensor attn;
  if (cache) attn = Tensor({nw, p.heads, l, l});
  std::vector<double> a(l * l);
  for (std::size_t n = 0; n < nw; ++n) {
    for (std::size_t hd = 0; hd < p.heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < l; ++i) {
        double* row = a.data() + i * l;
        for (std::size_t j = 0; j < l; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q(n * l + i, off + e) * k(n * l + j, off + e);
          row[j] = dot * sc + p.bias_table(relative_bias_index(i, j, p.win_h, p.win_w), hd);
        }
        softmax_row(row, l);
        for (std::size_t j = 0; j < l; ++j)
          for (std::size_t e = 0; e < dh; ++e) merged(n * l + i, off + e) += row[j] * v(n * l + j, off + e);
      }
      if (cache) std::copy(a.begin(), a.end(), attn.ptr() + (n * p.heads + hd) * l * l);
    }
  }
  Tensor out = matmul(merged, p.wo).reshaped({nw, l, c});
  if (cache) {
    cache->input = std::move(x);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->merged = std::move(merged);
  }
  return out;
}

WindowAttentionGrads window_attention_backward(const WindowAttentionCache& cache, const MHAParams& p,
                                               const Tensor& d_out) {
  if (cache.attn.empty()) throw ArgumentError("window_attention_backward: missing forward context");
  const std::size_t nw = cache.attn.dim(0), l = cache.attn.dim(2), c = cache.input.dim(1);
  const std::size_t dh = c / p.heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor g = d_out.reshaped({nw * l, c});
  WindowAttentionGrads out;
  out.d_wo = matmul_tn(cache.merged, g);
  const Tensor dm = matmul_nt(g, p.wo);
  out.d_bias_table = Tensor(p.bias_table.shape());
  Tensor dq({nw * l, c}), dk({nw * l, c}), dv({nw * l, c});
  std::vector<double> da(l);
  for (std::size_t n = 0; n < nw; ++n) {
    for (std::size_t hd = 0; hd < p.heads; ++hd) {
      const std::size_t off = hd * dh;
      const double* a = cache.attn.ptr() + (n * p.heads + hd) * l * l;
      for (std::size_t i = 0; i < l; ++i) {
        const double* row = a + i * l;
        double dot = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) {
            const double gm = dm(n * l + i, off + e);
            acc += gm * cache.v(n * l + j, off + e);
            dv(n * l + j, off + e) += row[j] * gm;
          }
          da[j] = acc;
          dot += acc * row[j];
        }
        for (std::size_t j = 0; j < l; ++j) {
          const double ds = row[j] * (da[j] - dot);
          out.d_bias_table(relative_bias_index(i, j, p.win_h, p.win_w), hd) += ds;
          for (std::size_t e = 0; e < dh; ++e) {
            dq(n * l + i, off + e) += ds * sc * cache.k(n * l + j, off + e);
            dk(n * l + j, off + e) += ds * sc * cache.q(n * l + i, off + e);
          }
        }
      }
    }
  }
  out.d_wq = matmul_tn(cache.input, dq);
  out.d_wk = matmul_tn(cache.input, dk);
  out.d_wv = matmul_tn(cache.input, dv);
  Tensor dx = matmul_nt(dq, p.wq);
  axpy(dx, matmul_nt(dk, p.wk));
  axpy(dx, matmul_nt(dv, p.wv));
  out.d_windows = dx.reshaped({nw, l, c});
  return out;
}

// ---- block parameters -------------------------------------------------------

void BlockParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("ln1.g", ln1_g);
  fn("ln1.b", ln1_b);
  fn("attn.wq", attn.wq);
  fn("attn.wk", attn.wk);
  fn("attn.wv", attn.wv);
  fn("attn.wo", attn.wo);
  fn("attn.bias", attn.bias_table);
  fn("ln2.g", ln2_g);
  fn("ln2.b", ln2_b);
  fn("sca.cores", clusters.cores);
  fn("sca.lambda", clusters.lambda);
  fn("sca.mu", clusters.mu);
  fn("sca.wq", sca.wq);
  fn("sca.wk", sca.wk);
  fn("sca.wv", sca.wv);
  fn("ln3.g", ln3_g);
  fn("ln3.b", ln3_b);
  fn("mlp.w1", mlp_w1);
  fn("mlp.b1", mlp_b1);
  fn("mlp.w2", mlp_w2);
  fn("mlp.b2", mlp_b2);
}

BlockParams BlockParams::zeros_like() const {
  BlockParams z = *this;
  z.for_each([](const std::string&, Tensor& t) {
    if (!t.empty()) t.fill(0.0);
  });
  return z;
}

BlockParams BlockParams::init(std::size_t channels, std::size_t heads, std::size_t window, std::size_t clusters,
                              std::size_t sca_heads, double beta, std::mt19937_64& rng) {
  const std::size_t c = channels;
  auto normal = [&](Shape s, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  const double proj = 1.0 / std::sqrt(static_cast<double>(c));
  BlockParams p;
  p.ln1_g = Tensor({c}, 1.0);
  p.ln1_b = Tensor({c});
  p.attn.heads = heads;
  p.attn.win_h = p.attn.win_w = window;
  p.attn.wq = normal({c, c}, proj);
  p.attn.wk = normal({c, c}, proj);
  p.attn.wv = normal({c, c}, proj);
  p.attn.wo = normal({c, c}, proj);
  p.attn.bias_table = normal({(2 * window - 1) * (2 * window - 1), heads}, 0.02);
  p.ln2_g = Tensor({c}, 1.0);
  p.ln2_b = Tensor({c});
  p.clusters = ClusterState::random(clusters, c, beta, rng);
  p.sca.heads = sca_heads;
  p.sca.wq = normal({c, c}, proj);
  p.sca.wk = normal({c, c}, proj);
  p.sca.wv = normal({c, c}, proj);
  p.ln3_g = Tensor({c}, 1.0);
  p.ln3_b = Tensor({c});
  p.mlp_w1 = normal({c, 2 * c}, proj);
  p.mlp_b1 = Tensor({2 * c});
  p.mlp_w2 = normal({2 * c, c}, 1.0 / std::sqrt(2.0 * static_cast<double>(c)));
  p.mlp_b2 = Tensor({c});
  return p;
}

// ---- block ------------------------------------------------------------------

namespace {

long shift_of(const BlockParams& p) { return static_cast<long>(p.attn.win_h / 2); }
long shift_w_of(const BlockParams& p) { return static_cast<long>(p.attn.win_w / 2); }

}  // namespace

Tensor mpt_block(const Tensor& x, const StageFields& fields, const BlockParams& p, const BlockOptions& opt,
                 BlockCache* cache) {
  if (x.rank() != 3) throw ShapeError("mpt_block: expected [C,H,W], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(1), w = x.dim(2);
  if (!fields.identity &&
      (fields.forward.height() != h || fields.forward.width() != w || fields.inverse.height() != h ||
       fields.inverse.width() != w)) {
    throw ShapeError("mpt_block: stage field does not match feature map " + shape_str(x.shape()));
  }
  BlockCache local;
  BlockCache& cc = cache ? *cache : local;
  cc.h = h;
  cc.w = w;
  const Tensor tokens = to_tokens(x);

  // spatial branch
  const Tensor a = layer_norm(tokens, p.ln1_g, p.ln1_b, kLayerNormEps, &cc.ln1);
  cc.a_img = from_tokens(a, h, w);
  Tensor d = fields.identity ? cc.a_img : deform_features(cc.a_img, fields.forward);
  if (opt.shifted) d = cyclic_shift(d, -shift_of(p), -shift_w_of(p));
  const Tensor win = window_partition(d, p.attn.win_h, p.attn.win_w);
  Tensor m = window_merge(window_attention(win, p.attn, &cc.wa), h, w, p.attn.win_h, p.attn.win_w);
  if (opt.shifted) m = cyclic_shift(m, shift_of(p), shift_w_of(p));
  cc.attn_img = std::move(m);
  const Tensor b = fields.identity ? cc.attn_img : deform_features(cc.attn_img, fields.inverse);
  Tensor x2 = add(tokens, to_tokens(b));

  // semantic branch
  if (opt.use_sca) {
    if (opt.fusion == Fusion::sequential) {
      cc.sca_in = layer_norm(x2, p.ln2_g, p.ln2_b, kLayerNormEps, &cc.ln2);
    } else {
      cc.sca_in = a;
    }
    cc.assign = soft_assign(cc.sca_in, p.clusters);
    const Tensor cores = update_cores(cc.sca_in, p.clusters.cores, cc.assign, opt.core_mode);
    axpy(x2, sca_forward(cc.sca_in, cores, p.sca, &cc.sca));
  }

  // MLP
  cc.ln3_out = layer_norm(x2, p.ln3_g, p.ln3_b, kLayerNormEps, &cc.ln3);
  cc.mlp_pre = matmul(cc.ln3_out, p.mlp_w1);
  add_row_bias(cc.mlp_pre, p.mlp_b1);
  cc.mlp_hidden = gelu(cc.mlp_pre);
  Tensor mlp = matmul(cc.mlp_hidden, p.mlp_w2);
  add_row_bias(mlp, p.mlp_b2);
  axpy(x2, mlp);
  return from_tokens(x2, h, w);
}

BlockGrads mpt_block_backward(const BlockCache& cc, const Tensor& d_out, const StageFields& fields,
                              const BlockParams& p, const BlockOptions& opt) {
  if (cc.ln1.xhat.empty() || cc.ln3.xhat.empty()) {
    throw ArgumentError("mpt_block_backward: missing forward context");
  }
  const std::size_t h = cc.h, w = cc.w;
  BlockGrads g;
  g.params = p.zeros_like();
  BlockParams& gp = g.params;

  Tensor dx2 = to_tokens(d_out);

  // MLP
  gp.mlp_w2 = matmul_tn(cc.mlp_hidden, dx2);
  const auto b2 = column_sums(dx2);
  std::copy(b2.begin(), b2.end(), gp.mlp_b2.ptr());
  const Tensor dpre = gelu_backward(cc.mlp_pre, matmul_nt(dx2, p.mlp_w2));
  gp.mlp_w1 = matmul_tn(cc.ln3_out, dpre);
  const auto b1 = column_sums(dpre);
  std::copy(b1.begin(), b1.end(), gp.mlp_b1.ptr());
  auto ln3 = layer_norm_backward(cc.ln3, p.ln3_g, matmul_nt(dpre, p.mlp_w1));
  gp.ln3_g = std::move(ln3.d_gamma);
  gp.ln3_b = std::move(ln3.d_beta);
  axpy(dx2, ln3.d_x);

  // semantic branch; dx2 is now the gradient w.r.t. the post-spatial tokens
  Tensor d_a_extra;
  if (opt.use_sca) {
    auto sg = sca_backward(cc.sca, p.sca, dx2);
    gp.sca.wq = std::move(sg.d_wq);
    gp.sca.wk = std::move(sg.d_wk);
    gp.sca.wv = std::move(sg.d_wv);
    auto ug = update_cores_backward(cc.sca_in, p.clusters.cores, cc.assign, opt.core_mode, sg.d_new_cores);
    gp.clusters.cores = std::move(ug.d_cores);
    auto ag = soft_assign_backward(cc.sca_in, p.clusters.lambda, cc.assign, ug.d_assign);
    gp.clusters.lambda = std::move(ag.d_lambda);
    gp.clusters.mu = std::move(ag.d_mu);
    Tensor d_in = std::move(sg.d_features);
    axpy(d_in, ug.d_features);
    axpy(d_in, ag.d_features);
    if (opt.fusion == Fusion::sequential) {
      auto ln2 = layer_norm_backward(cc.ln2, p.ln2_g, d_in);
      gp.ln2_g = std::move(ln2.d_gamma);
      gp.ln2_b = std::move(ln2.d_beta);
      axpy(dx2, ln2.d_x);
    } else {
      d_a_extra = std::move(d_in);
    }
  }

  // spatial branch
  Tensor d_tokens = dx2;
  Tensor dm = from_tokens(dx2, h, w);
  if (!fields.identity) {
    auto wb = warp_backward(cc.attn_img, fields.inverse.offsets(), dm);
    dm = std::move(wb.d_x);
    g.d_phi_inv = std::move(wb.d_coords);
  }
  if (opt.shifted) dm = cyclic_shift(dm, -shift_of(p), -shift_w_of(p));
  auto ab = window_attention_backward(cc.wa, p.attn, window_partition(dm, p.attn.win_h, p.attn.win_w));
  gp.attn.wq = std::move(ab.d_wq);
  gp.attn.wk = std::move(ab.d_wk);
  gp.attn.wv = std::move(ab.d_wv);
  gp.attn.wo = std::move(ab.d_wo);
  gp.attn.bias_table = std::move(ab.d_bias_table);
  Tensor dd = window_merge(ab.d_windows, h, w, p.attn.win_h, p.attn.win_w);
  if (opt.shifted) dd = cyclic_shift(dd, shift_of(p), shift_w_of(p));
  if (!fields.identity) {
    auto fb = warp_backward(cc.a_img, fields.forward.offsets(), dd);
    dd = std::move(fb.d_x);
    g.d_phi = std::move(fb.d_coords);
  }
  Tensor da = to_tokens(dd);
  if (!d_a_extra.empty()) axpy(da, d_a_extra);
  auto ln1 = layer_norm_backward(cc.ln1, p.ln1_g, da);
  gp.ln1_g = std::move(ln1.d_gamma);
  gp.ln1_b = std::move(ln1.d_beta);
  axpy(d_tokens, ln1.d_x);
  g.d_x = from_tokens(d_tokens, h, w);
  return g;
}

}  // namespace mpt
