// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mpt/diffeo.hpp"
#include "mpt/gradcheck.hpp"
#include "mpt/metrics.hpp"
#include "mpt/morphpatch.hpp"
#include "mpt/sca.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mpt;
using mpt::testing::normal;
using mpt::testing::smooth_velocity;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  const std::string cmd = std::string(MPT_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return -1;
  std::string text;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) text.append(buf.data(), n);
  const int status = pclose(p);
  if (out) *out = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// ---- 1: diffeomorphism suite ------------------------------------------------

Outcome diffeomorphism() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  double min_jac = INFINITY, max_inv = 0.0;
  constexpr std::size_t margin = 2;  // ceil(v_max)
  for (int trial = 0; trial < 100; ++trial) {
    const VelocityField v(smooth_velocity(64, 64, 2.0, rng), 2.0);
    const auto phi = exponentiate(v, 7), inv = invert(v, 7);
    min_jac = std::min(min_jac, min_interior_jacobian(phi, 1));
    max_inv = std::max(max_inv, mpt::testing::interior_max_norm(compose(phi, inv).offsets(), margin));
  }
  const double secs = seconds_since(t0);
  return {min_jac > 0.0 && max_inv < 0.05 && secs < 30.0,
          fmt("100 fields 64x64: min jacobian %.4f, max inverse error %.4f px, %.1f s", min_jac, max_inv, secs)};
}

// ---- 2: closed-form flows ---------------------------------------------------

Outcome closed_form_flow() {
  const std::size_t n = 64;
  Tensor c({2, n, n});
  for (std::size_t k = 0; k < n * n; ++k) {
    c[k] = 3.0;
    c[n * n + k] = -1.5;
  }
  const Tensor pc = exponentiate(VelocityField(c), 6).offsets();
  double err_c = 0.0;
  for (std::size_t i = 3; i + 3 < n; ++i)
    for (std::size_t j = 3; j + 3 < n; ++j)
      err_c = std::max({err_c, std::abs(pc(0, i, j) - 3.0), std::abs(pc(1, i, j) + 1.5)});

  const double a = 0.1, center = 31.5;
  Tensor lin({2, n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) lin(0, i, j) = a * (static_cast<double>(i) - center);
  const Tensor pl = exponentiate(VelocityField(lin), 8).offsets();
  double err_l = 0.0;
  for (std::size_t i = 8; i + 8 < n; ++i) {
    const double exact = (std::exp(a) - 1.0) * (static_cast<double>(i) - center);
    for (std::size_t j = 4; j + 4 < n; ++j) err_l = std::max(err_l, std::abs(pl(0, i, j) - exact) / std::abs(exact));
  }
  return {err_c < 1e-9 && err_l < 1e-4,
          fmt("constant field max error %.2e, linear field max relative error %.2e", err_c, err_l)};
}

// ---- 3: soft K-means forms --------------------------------------------------

Outcome assignment_forms() {
  std::mt19937_64 rng(1003);
  std::uniform_real_distribution<double> beta(0.05, 5.0);
  double eq = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor f = normal({32, 6}, rng), cores = normal({8, 6}, rng);
    const double b = beta(rng);
    eq = std::max(eq, max_abs_diff(soft_assign(f, ClusterState::derived(cores, b)), soft_assign_gaussian(f, cores, b)));
  }
  // Separated data: four centers, points within 0.5 of them.
  const double centers[4][2] = {{0, 0}, {0, 10}, {10, 0}, {10, 10}};
  Tensor cores({4, 2}), f({64, 2});
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t k = 0; k < 2; ++k) cores(s, k) = centers[s][k] + 0.4;
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 2; ++k) f(i, k) = centers[i % 4][k] + jitter(rng);
  const Tensor a = soft_assign(f, ClusterState::derived(cores, 100.0));
  double hard = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    std::size_t best = 0;
    double bd = INFINITY;
    for (std::size_t s = 0; s < 4; ++s) {
      const double d = std::hypot(f(i, 0) - cores(s, 0), f(i, 1) - cores(s, 1));
      if (d < bd) bd = d, best = s;
    }
    for (std::size_t s = 0; s < 4; ++s) hard = std::max(hard, std::abs(a(i, s) - (s == best ? 1.0 : 0.0)));
  }
  return {eq < 1e-12 && hard < 1e-8,
          fmt("Gaussian vs softmax max diff %.2e over 100 draws, beta=100 vs hard one-hot %.2e", eq, hard)};
}

// ---- 4: reference morph patches ---------------------------------------------

Outcome morph_patch_consistency() {
  std::mt19937_64 rng(1004);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = normal({4, 32, 32}, rng);
    const auto phi = exponentiate(VelocityField(smooth_velocity(32, 32, 4.0, rng, 3.0)));
    for (std::size_t p : {2, 4, 8}) {
      const auto g = make_patch_grid(32, 32, p, p);
      worst = std::max(worst, max_abs_diff(morph_patch_extract(x, phi, g), patch_pool(deform_features(x, phi), g)));
    }
  }
  return {worst < 1e-12, fmt("max diff %.2e over 150 cases", worst)};
}

// ---- 5: gradients -----------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  double kmax = 0.0;
  std::string kworst;
  for (const auto& name : gradcheck_kernels())
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const FdReport r = check_kernel(name, seed);
      if (r.max_rel_err > kmax) kmax = r.max_rel_err, kworst = name;
    }
  const FdReport net = check_network(gradcheck_network_config());
  const double secs = seconds_since(t0);
  return {kmax < kKernelGradTol && net.max_rel_err < kNetworkGradTol && secs < 300.0,
          fmt("%zu kernels x 20 seeds max %.2e (%s), network %.2e over %zu coords, %.0f s", gradcheck_kernels().size(),
              kmax, kworst.c_str(), net.max_rel_err, net.checked, secs)};
}

// ---- 6: metrics oracle ------------------------------------------------------

Outcome metrics_oracle() {
  using metrics::BinaryImage;
  auto mask = [](const BinaryImage& b) {
    Tensor t({b.h, b.w});
    for (std::size_t k = 0; k < b.px.size(); ++k) t[k] = b.px[k];
    return SegMask(t, 2);
  };
  const auto p = mask(BinaryImage::from_rows({"##..", "##..", "....", "...."}));
  const auto g = mask(BinaryImage::from_rows({".##.", ".##.", "....", "...."}));
  bool ok = metrics::dice(p, g, 1) == 0.5 && metrics::iou(p, g, 1) == 2.0 / 6.0;

  std::string full(22, '.'), blank(22, '.');
  for (std::size_t j = 1; j <= 20; ++j) full[j] = '#';
  std::string gap = full;
  for (std::size_t j = 16; j <= 20; ++j) gap[j] = '.';
  const double cl = metrics::cl_dice(BinaryImage::from_rows({blank, gap, blank}), BinaryImage::from_rows({blank, full, blank}));
  ok = ok && cl == 2.0 * 0.75 / 1.75;

  const auto square = BinaryImage::from_rows({".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", "......."});
  ok = ok && metrics::skeletonize(square) ==
                 BinaryImage::from_rows({".......", ".......", ".......", "...#...", "...#...", ".......", "......."});

  std::mt19937_64 rng(1006);
  std::size_t idem = 0, comps = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = mpt::testing::random_mask(32, 32, rng);
    const auto s = metrics::skeletonize(m);
    idem += metrics::skeletonize(s) == s;
    comps += metrics::count_components(s) == metrics::count_components(m);
  }
  ok = ok && idem == 200 && comps == 200;
  return {ok, fmt("hand examples %s, clDice line %.6f, idempotent %zu/200, components preserved %zu/200",
                  ok ? "exact" : "mismatch", cl, idem, comps)};
}

// ---- 7-9: training runs through the CLI -------------------------------------

struct RunResult {
  bool ok = false;
  double dice = 0.0, cldice = 0.0, min_jacobian = INFINITY, secs = 0.0;
  std::string error;
};

struct Trainer {
  fs::path work;
  std::string train_cfg = std::string(MPT_CONFIG_DIR) + "/train_phantom.cfg";
  std::string spec_cfg = std::string(MPT_CONFIG_DIR) + "/phantom_curved.cfg";

  fs::path data(std::uint64_t seed) const { return work / ("data_seed" + std::to_string(seed)); }

  bool make_data(std::uint64_t seed, std::string* err) const {
    if (fs::exists(data(seed) / "manifest.txt")) return true;
    std::string out;
    const int rc = run_cli("phantom --spec " + spec_cfg + " --out " + data(seed).string() + " --seed " +
                               std::to_string(seed),
                           &out);
    if (rc != 0) *err = out;
    return rc == 0;
  }

  RunResult train(const std::string& tag, std::uint64_t seed, const std::string& flags) const {
    RunResult r;
    if (!make_data(seed, &r.error)) return r;
    const fs::path ckpt = work / (tag + ".mpck");
    const auto t0 = Clock::now();
    std::string out;
    const int rc = run_cli("train --config " + train_cfg + " --data " + data(seed).string() + " --out " +
                               ckpt.string() + " --seed " + std::to_string(seed) + " " + flags,
                           &out);
    r.secs = seconds_since(t0);
    if (rc != 0) {
      r.error = out;
      return r;
    }
    std::istringstream csv(slurp(fs::path(ckpt.string() + ".csv")));
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      double epoch = 0, loss = 0, jac = 0;
      if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &epoch, &loss, &r.dice, &r.cldice, &jac) != 5) {
        r.error = "bad log row: " + line;
        return r;
      }
      r.min_jacobian = std::min(r.min_jacobian, jac);
    }
    r.ok = true;
    return r;
  }
};

Outcome desk_training(const Trainer& t, RunResult& full0) {
  full0 = t.train("full_seed0", 0, "");
  if (!full0.ok) return {false, "training failed: " + full0.error};
  const bool pass = full0.dice >= 0.85 && full0.cldice >= 0.85 && full0.secs <= 1800.0 && full0.min_jacobian > 0.0;
  return {pass, fmt("eval Dice %.4f, clDice %.4f, min jacobian over training %.4f, %.0f s", full0.dice, full0.cldice,
                    full0.min_jacobian, full0.secs)};
}

Outcome ablation(const Trainer& t, const RunResult& full0, std::size_t seeds) {
  const char* names[3] = {"full", "no-mp", "no-mp-no-sca"};
  const char* flags[3] = {"", "--no-mp", "--no-mp --no-sca"};
  double dice[3] = {0, 0, 0}, cl[3] = {0, 0, 0};
  std::ofstream csv(t.work / "ablation.csv");
  csv << "seed,config,dice,cldice\n";
  for (std::size_t s = 0; s < seeds; ++s) {
    for (int c = 0; c < 3; ++c) {
      RunResult r = (s == 0 && c == 0 && full0.ok)
                        ? full0
                        : t.train(std::string(names[c]) + "_seed" + std::to_string(s), s, flags[c]);
      if (!r.ok) return {false, std::string("training failed: ") + r.error};
      csv << s << ',' << names[c] << ',' << fmt("%.6f", r.dice) << ',' << fmt("%.6f", r.cldice) << '\n';
      std::printf("    seed %zu %-13s Dice %.4f clDice %.4f (%.0f s)\n", s, names[c], r.dice, r.cldice, r.secs);
      std::fflush(stdout);
      dice[c] += r.dice / static_cast<double>(seeds);
      cl[c] += r.cldice / static_cast<double>(seeds);
    }
  }
  const bool direction = cl[0] >= cl[1] && dice[0] >= dice[2];
  const double margin = cl[0] - cl[1];
  const bool pass = direction && margin >= 0.005;
  std::string detail = fmt(
      "mean clDice full %.4f vs no-mp %.4f (margin %+.4f), mean Dice full %.4f vs no-mp-no-sca %.4f; per-seed CSV %s",
      cl[0], cl[1], margin, dice[0], dice[2], (t.work / "ablation.csv").string().c_str());
  if (direction && !pass) detail += "; FLAGGED: clDice margin below 0.005";
  return {pass, detail};
}

Outcome determinism(const Trainer& t, const RunResult& full0) {
  if (!full0.ok) return {false, "reference run missing"};
  const RunResult again = t.train("repeat_seed0", 0, "");
  if (!again.ok) return {false, "training failed: " + again.error};
  const auto a = t.work / "full_seed0.mpck", b = t.work / "repeat_seed0.mpck";
  const bool ck = slurp(a) == slurp(b) && !slurp(a).empty();
  const bool lg = slurp(a.string() + ".csv") == slurp(b.string() + ".csv");
  return {ck && lg, fmt("checkpoint %s, log %s", ck ? "bit-identical" : "differs", lg ? "bit-identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  std::size_t seeds = 5;
  app.add_option("--workdir", workdir, "Directory for datasets, checkpoints and logs");
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  app.add_option("--seeds", seeds, "Ablation seeds")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::set<int> want(only.begin(), only.end());
  auto selected = [&](int k) { return want.empty() || want.count(k) != 0; };
  Trainer trainer;
  trainer.work = fs::absolute(workdir);
  fs::create_directories(trainer.work);

  int failed = 0;
  auto report = [&](int k, const char* name, const std::function<Outcome()>& fn) {
    if (!selected(k)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s %s: %s\n", k, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  };

  RunResult full0;
  report(1, "diffeomorphism", diffeomorphism);
  report(2, "closed-form flow", closed_form_flow);
  report(3, "soft k-means forms", assignment_forms);
  report(4, "morph patch reference", morph_patch_consistency);
  report(5, "gradients", gradients);
  report(6, "metrics oracle", metrics_oracle);
  report(7, "desk-scale training", [&] { return desk_training(trainer, full0); });
  report(8, "ablation direction", [&] { return ablation(trainer, full0, seeds); });
  report(9, "determinism", [&] {
    if (!full0.ok) full0 = trainer.train("full_seed0", 0, "");
    return determinism(trainer, full0);
  });
  return failed == 0 ? 0 : 1;
}
