#include "mpt/sca.hpp"

#include <algorithm>
#include <cmath>

namespace mpt {

namespace {

void require_features(const Tensor& f, std::size_t d, const char* op) {
  if (f.rank() != 2 || f.dim(1) != d) {
    throw ShapeError(std::string(op) + ": features " + shape_str(f.shape()) + " do not have dimension " +
                     std::to_string(d));
  }
}

void softmax_rows_inplace(double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, row[k]);
  double z = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    row[k] = std::exp(row[k] - mx);
    z += row[k];
  }
  const double inv = 1.0 / z;
  for (std::size_t k = 0; k < n; ++k) row[k] *= inv;
}

}  // namespace

ClusterState ClusterState::derived(Tensor cores, double beta) {
  if (cores.rank() != 2) throw ShapeError("cluster cores must be [n,d]");
  if (!(beta >= 0.0)) throw ArgumentError("beta must be non-negative");
  const std::size_t n = cores.dim(0), d = cores.dim(1);
  ClusterState cs;
  cs.lambda = scale(cores, 2.0 * beta);
  cs.mu = Tensor({n});
  for (std::size_t s = 0; s < n; ++s) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += cores(s, k) * cores(s, k);
    cs.mu[s] = -beta * sq;
  }
  cs.cores = std::move(cores);
  cs.beta = beta;
  return cs;
}

ClusterState ClusterState::random(std::size_t clusters, std::size_t d, double beta, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor cores({clusters, d});
  for (auto& v : cores.data()) v = normal(rng);
  return derived(std::move(cores), beta);
}

double SCAParams::scale() const { return 1.0 / std::sqrt(static_cast<double>(dim())); }

Tensor soft_assign(const Tensor& features, const ClusterState& cs) {
  require_features(features, cs.lambda.dim(1), "soft_assign");
  if (cs.mu.size() != cs.lambda.dim(0)) throw ShapeError("soft_assign: mu size mismatch");
  Tensor logits = matmul_nt(features, cs.lambda);
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = logits.ptr() + i * n;
    for (std::size_t s = 0; s < n; ++s) row[s] += cs.mu[s];
    softmax_rows_inplace(row, n);
  }
  return logits;
}

Tensor soft_assign_gaussian(const Tensor& features, const Tensor& cores, double beta) {
  require_features(features, cores.dim(1), "soft_assign_gaussian");
  const std::size_t m = features.dim(0), n = cores.dim(0), d = cores.dim(1);
  Tensor g({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = g.ptr() + i * n;
    for (std::size_t s = 0; s < n; ++s) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = features(i, k) - cores(s, k);
        sq += diff * diff;
      }
      row[s] = -beta * sq;
    }
    softmax_rows_inplace(row, n);
  }
  return g;
}

Tensor update_cores(const Tensor& features, const Tensor& cores, const Tensor& assign, CoreUpdate mode) {
  require_features(features, cores.dim(1), "update_cores");
  const std::size_t m = features.dim(0), n = cores.dim(0), d = cores.dim(1);
  if (assign.rank() != 2 || assign.dim(0) != m || assign.dim(1) != n) {
    throw ShapeError("update_cores: assignment shape " + shape_str(assign.shape()) + " mismatch");
  }
  // sum_i g_is (f_i - c_s) = (G^T F)_s - (sum_i g_is) c_s
  Tensor out = matmul_tn(assign, features);
  for (std::size_t s = 0; s < n; ++s) {
    double mass = 0.0;
    for (std::size_t i = 0; i < m; ++i) mass += assign(i, s);
    if (mode == CoreUpdate::residual && mass > kCoreUpdateEps) {
      // c + (P - mass c) / mass reduces to the weighted mean P / mass.
      for (std::size_t k = 0; k < d; ++k) out(s, k) /= mass;
      continue;
    }
    for (std::size_t k = 0; k < d; ++k) out(s, k) -= mass * cores(s, k);
    if (mode == CoreUpdate::residual) {
      for (std::size_t k = 0; k < d; ++k) out(s, k) = cores(s, k) + out(s, k) / kCoreUpdateEps;
    }
  }
  return out;
}

Tensor update_cores(const Tensor& features, const ClusterState& cs, CoreUpdate mode) {
  return update_cores(features, cs.cores, soft_assign(features, cs), mode);
}

namespace {

void check_sca(const Tensor& features, const Tensor& new_cores, const SCAParams& p) {
  const std::size_t d = p.wq.rank() == 2 ? p.wq.dim(0) : 0;
  if (d == 0 || p.wq.shape() != Shape{d, d} || p.wk.shape() != p.wq.shape() || p.wv.shape() != p.wq.shape()) {
    throw ShapeError("sca: projections must all be [d,d]");
  }
  if (p.heads == 0 || d % p.heads != 0) throw ShapeError("sca: feature dim not divisible by head count");
  require_features(features, d, "sca_forward");
  require_features(new_cores, d, "sca_forward (cores)");
}

}  // namespace

Tensor sca_attention_weights(const Tensor& features, const Tensor& new_cores, const SCAParams& p,
                             std::size_t head) {
  check_sca(features, new_cores, p);
  if (head >= p.heads) throw ArgumentError("sca: head index out of range");
  const Tensor q = matmul(features, p.wq);
  const Tensor k = matmul(new_cores, p.wk);
  const std::size_t m = q.dim(0), n = k.dim(0), d = q.dim(1), dh = d / p.heads, off = head * dh;
  const double sc = p.scale();
  Tensor a({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = a.ptr() + i * n;
    for (std::size_t s = 0; s < n; ++s) {
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c) dot += q(i, off + c) * k(s, off + c);
      row[s] = dot * sc;
    }
    softmax_rows_inplace(row, n);
  }
  return a;
}

Tensor sca_forward(const Tensor& features, const Tensor& new_cores, const SCAParams& p, ScaCache* cache) {
  check_sca(features, new_cores, p);
  Tensor q = matmul(features, p.wq);
  Tensor k = matmul(new_cores, p.wk);
  Tensor v = matmul(new_cores, p.wv);
  const std::size_t m = q.dim(0), n = k.dim(0), d = q.dim(1), dh = d / p.heads;
  const double sc = p.scale();
  Tensor out({m, d});
  Tensor attn;
  if (cache) attn = Tensor({p.heads, m, n});
  std::vector<double> row(n);
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t s = 0; s < n; ++s) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, off + c) * k(s, off + c);
        row[s] = dot * sc;
      }
      softmax_rows_inplace(row.data(), n);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t c = 0; c < dh; ++c) out(i, off + c) += row[s] * v(s, off + c);
      if (cache) std::copy(row.begin(), row.end(), attn.ptr() + (hd * m + i) * n);
    }
  }
  if (cache) {
    cache->features = features;
    cache->new_cores = new_cores;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
  }
  return out;
}

}  // namespace mpt
