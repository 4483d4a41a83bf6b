#include <cmath>
#include <random>

#include "doctest.h"
#include "mpt/attention.hpp"
#include "mpt/morphpatch.hpp"
#include "support.hpp"

using namespace mpt;
using mpt::testing::normal;
using mpt::testing::smooth_velocity;

namespace {

MHAParams random_mha(std::size_t c, std::size_t heads, std::size_t win, std::mt19937_64& rng) {
  MHAParams p;
  p.heads = heads;
  p.win_h = p.win_w = win;
  p.wq = normal({c, c}, rng, 0.5);
  p.wk = normal({c, c}, rng, 0.5);
  p.wv = normal({c, c}, rng, 0.5);
  p.wo = normal({c, c}, rng, 0.5);
  p.bias_table = normal({(2 * win - 1) * (2 * win - 1), heads}, rng, 0.5);
  return p;
}

BlockParams random_block(std::size_t c, std::mt19937_64& rng) {
  BlockParams p = BlockParams::init(c, 2, 4, 5, 2, 1.0, rng);
  p.for_each([&](const std::string&, Tensor& t) { t = add(t, normal(t.shape(), rng, 0.1)); });
  return p;
}

StageFields smooth_fields(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  const VelocityField v(smooth_velocity(h, w, 2.0, rng, 3.0));
  return {exponentiate(v), invert(v), false};
}

}  // namespace

TEST_CASE("relative bias index") {
  CHECK(relative_bias_index(0, 0, 2, 2) == relative_bias_index(3, 3, 2, 2));
  CHECK(relative_bias_index(0, 3, 2, 2) != relative_bias_index(3, 0, 2, 2));
  std::size_t hi = 0;
  for (std::size_t a = 0; a < 16; ++a)
    for (std::size_t b = 0; b < 16; ++b) hi = std::max(hi, relative_bias_index(a, b, 4, 4));
  CHECK(hi == 48);
}

TEST_CASE("window attention examples") {
  std::mt19937_64 rng(41);
  const auto p1 = random_mha(4, 2, 1, rng);
  const Tensor single = normal({5, 1, 4}, rng);
  const Tensor out1 = window_attention(single, p1);
  const Tensor expect = matmul(matmul(single.reshaped({5, 4}), p1.wv), p1.wo);
  CHECK(max_abs_diff(out1.reshaped({5, 4}), expect) < 1e-12);

  auto p = random_mha(4, 2, 2, rng);
  p.wq = Tensor({4, 4});
  p.wk = Tensor({4, 4});
  p.bias_table.fill(0.0);
  const Tensor x = normal({3, 4, 4}, rng);
  const Tensor u = window_attention(x, p);
  const Tensor v = matmul(x.reshaped({12, 4}), p.wv);
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor mean({1, 4});
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t k = 0; k < 4; ++k) mean[k] += v(n * 4 + l, k) / 4.0;
    const Tensor row = matmul(mean, p.wo);
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(u(n, l, k) - row[k]) < 1e-12);
  }

  auto q = random_mha(4, 2, 2, rng);
  q.bias_table.fill(0.0);
  Tensor twin = normal({1, 4, 4}, rng);
  for (std::size_t k = 0; k < 4; ++k) twin(0, 2, k) = twin(0, 0, k);
  const Tensor t = window_attention(twin, q);
  for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(t(0, 0, k) - t(0, 2, k)) < 1e-12);
}

TEST_CASE("window attention rows are stochastic") {
  std::mt19937_64 rng(42);
  const auto p = random_mha(8, 4, 2, rng);
  WindowAttentionCache cache;
  window_attention(normal({3, 4, 8}, rng), p, &cache);
  const Tensor& a = cache.attn;
  const std::size_t rows = a.size() / 4;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(a[r * 4 + k] >= 0.0);
      s += a[r * 4 + k];
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("block with zero branches is the identity") {
  std::mt19937_64 rng(43);
  BlockParams p = random_block(8, rng);
  for (Tensor* t : {&p.attn.wq, &p.attn.wk, &p.attn.wv, &p.attn.wo, &p.attn.bias_table, &p.sca.wq, &p.sca.wk,
                    &p.sca.wv, &p.mlp_w1, &p.mlp_b1, &p.mlp_w2, &p.mlp_b2}) {
    t->fill(0.0);
  }
  const Tensor x = normal({8, 8, 8}, rng);
  const StageFields fields = smooth_fields(8, 8, rng);
  for (bool shifted : {false, true})
    for (Fusion fusion : {Fusion::sequential, Fusion::parallel_sum}) {
      BlockOptions opt;
      opt.shifted = shifted;
      opt.fusion = fusion;
      CHECK(mpt_block(x, fields, p, opt) == x);
    }
}

TEST_CASE("identity field matches the plain block") {
  std::mt19937_64 rng(44);
  const BlockParams p = random_block(8, rng);
  const Tensor x = normal({8, 8, 8}, rng);
  const StageFields id{DeformationField::identity(8, 8), DeformationField::identity(8, 8), false};
  for (bool shifted : {false, true}) {
    BlockOptions opt;
    opt.shifted = shifted;
    CHECK(max_abs_diff(mpt_block(x, id, p, opt), mpt_block(x, StageFields::none(), p, opt)) < 1e-12);
  }
}

TEST_CASE("shifted block is conjugate to the unshifted block") {
  std::mt19937_64 rng(45);
  const BlockParams p = random_block(8, rng);
  const Tensor x = normal({8, 8, 8}, rng);
  BlockOptions plain, shifted;
  shifted.shifted = true;
  const long s = static_cast<long>(p.attn.win_h / 2);
  const Tensor lhs = cyclic_shift(mpt_block(x, StageFields::none(), p, shifted), -s, -s);
  const Tensor rhs = mpt_block(cyclic_shift(x, -s, -s), StageFields::none(), p, plain);
  CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("block output shape") {
  std::mt19937_64 rng(46);
  const BlockParams p = random_block(8, rng);
  for (std::size_t n : {16, 32}) {
    const Tensor x = normal({8, n, n}, rng);
    const StageFields f = smooth_fields(n, n, rng);
    for (bool sca : {true, false}) {
      BlockOptions opt;
      opt.use_sca = sca;
      opt.shifted = !sca;
      CHECK(mpt_block(x, f, p, opt).shape() == x.shape());
    }
  }
}
