#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mpt/grad.hpp"
#include "mpt/gradcheck.hpp"
#include "support.hpp"

using namespace mpt;
using mpt::testing::normal;

TEST_CASE("softmax backward example") {
  const Tensor y = softmax(Tensor({2}, {0.0, 0.0}), 0);
  const Tensor g = softmax_backward(y, Tensor({2}, {1.0, 0.0}), 0);
  CHECK(g[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(-0.25).epsilon(1e-15));

  std::mt19937_64 rng(51);
  const Tensor p = softmax(normal({5}, rng), 0);
  for (std::size_t k = 0; k < 5; ++k) {
    Tensor e({5});
    e[k] = 1.0;
    CHECK(std::abs(sum(softmax_backward(p, e, 0))) < 1e-15);
  }
}

TEST_CASE("grid_sample backward scatters at integer coordinates") {
  std::mt19937_64 rng(52);
  const Tensor x = normal({1, 4, 4}, rng);
  const Tensor coords({3, 1, 2}, {0.0, 0.0, 2.0, 3.0, 2.0, 3.0});
  const Tensor up({1, 3, 1}, {1.5, -2.0, 0.25});
  const auto g = grid_sample_backward(x, coords, up);
  Tensor expect({1, 4, 4});
  expect(0, 0, 0) = 1.5;
  expect(0, 2, 3) = -1.75;
  CHECK(g.d_x == expect);
}

TEST_CASE("finite_diff_check on closed forms") {
  std::mt19937_64 rng(53);
  Tensor x = normal({4, 5}, rng);
  const Tensor g = scale(x, 2.0);
  auto quad = [&] {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return s;
  };
  CHECK(finite_diff_check(quad, {{"x", &x, &g}}).max_rel_err < 1e-9);

  const Tensor zero({4, 5});
  const auto rep = finite_diff_check([] { return 3.0; }, {{"x", &x, &zero}});
  CHECK(rep.max_rel_err == 0.0);
  CHECK(rep.numeric == 0.0);
  CHECK(rep.checked == 20);

  Tensor big = normal({30, 30}, rng);
  const Tensor gb = scale(big, 2.0);
  auto quad_big = [&] {
    double s = 0.0;
    for (double v : big.data()) s += v * v;
    return s;
  };
  CHECK(finite_diff_check(quad_big, {{"big", &big, &gb}}).checked == 200);
  CHECK_THROWS_AS(finite_diff_check([] { return NAN; }, {{"x", &x, &zero}}), FormatError);
}

TEST_CASE("adam") {
  ParamStore a;
  a.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
  const Tensor before = a.value("w");
  adam_step(a);
  CHECK(a.value("w") == before);

  for (double g : {3.0, -0.01, 1e4}) {
    ParamStore s;
    s.add("w", Tensor({1}, {0.7}));
    s.grad("w")[0] = g;
    adam_step(s, AdamOptions{0.01});
    CHECK(std::abs(s.value("w")[0] - 0.7) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK((s.value("w")[0] < 0.7) == (g > 0.0));
    CHECK(s.grad("w")[0] == 0.0);
  }

  std::mt19937_64 rng(54);
  ParamStore p, q;
  p.add("a", normal({4, 4}, rng));
  q.add("a", p.value("a"));
  for (int step = 0; step < 5; ++step) {
    const Tensor g = normal({4, 4}, rng);
    p.accumulate("a", g);
    q.accumulate("a", g);
    adam_step(p);
    adam_step(q);
  }
  CHECK(p.value("a") == q.value("a"));
}

TEST_CASE("parameter store") {
  ParamStore s;
  s.add("b", Tensor({2}));
  s.add("a", Tensor({3, 2}));
  CHECK(s.entries()[0].name == "b");
  CHECK(s.parameter_count() == 8);
  CHECK_THROWS(s.add("a", Tensor({1})));
  CHECK_THROWS(s.entry("missing"));
  CHECK_THROWS_AS(s.accumulate("a", Tensor({2})), ShapeError);
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 rng(55);
  ParamStore s;
  s.add("stem.w", normal({4, 1, 3, 3}, rng));
  s.add("head.b", normal({2}, rng));
  std::stringstream ss;
  write_checkpoint(ss, s);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "MPCK");
  const ParamStore r = read_checkpoint(ss);
  REQUIRE(r.entries().size() == 2);
  CHECK(r.entries()[0].name == "stem.w");
  CHECK(r.value("stem.w") == s.value("stem.w"));
  CHECK(r.value("head.b") == s.value("head.b"));

  std::stringstream bad("MPCX");
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_checkpoint(cut), FormatError);
}

TEST_CASE("every kernel backward matches finite differences on 20 seeds") {
  for (const auto& name : gradcheck_kernels()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const FdReport r = check_kernel(name, seed);
      INFO(name << " seed " << seed << " worst " << r.worst_name << "[" << r.worst_index << "]");
      CHECK(r.checked > 0);
      CHECK(r.max_rel_err < kKernelGradTol);
    }
  }
  CHECK_THROWS_AS(check_kernel("nope"), ArgumentError);
}

TEST_CASE("exponentiate gradient through the unrolled squarings") {
  std::mt19937_64 rng(56);
  Tensor v = mpt::testing::smooth_velocity(12, 12, 1.5, rng, 2.0);
  const Tensor proj = normal({2, 12, 12}, rng);
  std::vector<Tensor> hist;
  const auto base = exponentiate(VelocityField(v), 5, hist).offsets();
  const Tensor gv = exponentiate_backward(hist, proj);
  auto f = [&] {
    const Tensor y = exponentiate(VelocityField(v), 5).offsets();
    long double s = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(proj[i]) * (y[i] - base[i]);
    return static_cast<double>(s);
  };
  CHECK(finite_diff_check(f, {{"v", &v, &gv}}).max_rel_err < 1e-6);
}

TEST_CASE("whole-network gradient on a 16x16 input") {
  const FdReport r = check_network(gradcheck_network_config());
  INFO("worst " << r.worst_name << "[" << r.worst_index << "] analytic " << r.analytic << " numeric " << r.numeric);
  CHECK(r.checked > 1000);
  CHECK(r.max_rel_err < kNetworkGradTol);
}
