// mpt: dataset generation, training, evaluation, deformation inspection and
// gradient checks.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mpt/diffeo.hpp"
#include "mpt/gradcheck.hpp"
#include "mpt/model.hpp"
#include "mpt/morphpatch.hpp"
#include "mpt/pgm.hpp"
#include "mpt/phantom.hpp"

namespace fs = std::filesystem;
using namespace mpt;

namespace {

std::string sidecar(const std::string& ckpt) { return ckpt + ".cfg"; }

int run_phantom(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const auto cfg = KeyValueConfig::load(spec_path);
  auto spec = phantom::spec_from_config(cfg);
  if (seed) spec.seed = *seed;
  const long n_train = cfg.get_int("n_train", 64), n_eval = cfg.get_int("n_eval", 16);
  if (n_train < 0 || n_eval < 0) throw ArgumentError("n_train and n_eval must be >= 0");
  const auto entries = phantom::make_dataset(spec, static_cast<std::size_t>(n_train),
                                             static_cast<std::size_t>(n_eval), out);
  std::printf("wrote %zu samples to %s\n", entries.size(), out.c_str());
  return 0;
}

int run_train(const std::string& config, const std::string& data, const std::string& out, bool no_mp, bool no_sca,
              std::optional<std::uint64_t> seed, std::string log) {
  TrainConfig tc = train_config_from(KeyValueConfig::load(config));
  if (no_mp) tc.net.use_mp = false;
  if (no_sca) tc.net.use_sca = false;
  if (seed) tc.seed = *seed;
  const auto train_set = load_split(data, "train", tc.net.num_classes);
  const auto eval_set = load_split(data, "eval", tc.net.num_classes);
  if (log.empty()) log = out + ".csv";
  std::ofstream csv(log, std::ios::binary);
  if (!csv) throw FormatError("cannot open log '" + log + "'");

  MPTNet net(tc.net, tc.seed);
  const auto logs = train(net, tc, train_set, eval_set, &csv);
  save_checkpoint(out, net.params());
  std::ofstream side(sidecar(out), std::ios::binary);
  side << to_config_text(tc);
  if (!side) throw FormatError("cannot write '" + sidecar(out) + "'");
  if (!logs.empty()) {
    const auto& e = logs.back();
    std::printf("epochs %zu loss %.4f dice %.4f cldice %.4f min_jacobian %.4f\n", e.epoch, e.loss, e.dice, e.cldice,
                e.min_jacobian);
  }
  return 0;
}

// Aligned summary lines followed by per-class CSV rows.
void report_eval(const std::vector<SegMask>& preds, const std::vector<Sample>& gt) {
  std::vector<CaseScores> cases;
  for (std::size_t i = 0; i < gt.size(); ++i) cases.push_back(score_case(preds[i], gt[i].mask));
  const EvalSummary s = summarize(cases);
  std::printf("cases %zu\n", s.cases);
  std::printf("Dice %.3f (%.3f)\n", s.dice.mean, s.dice.std);
  std::printf("mIoU %.3f (%.3f)\n", s.miou.mean, s.miou.std);
  std::printf("clDice %.3f (%.3f)\n", s.cldice.mean, s.cldice.std);
  std::printf("metric,class,value\n");
  const std::size_t k = gt.empty() ? 0 : gt[0].mask.num_classes();
  for (std::size_t c = 1; c < k; ++c) {
    std::vector<double> d, j, cl;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const int ci = static_cast<int>(c);
      d.push_back(metrics::dice(preds[i], gt[i].mask, ci));
      j.push_back(metrics::iou(preds[i], gt[i].mask, ci));
      cl.push_back(metrics::cl_dice(metrics::BinaryImage::from_mask(preds[i], ci),
                                    metrics::BinaryImage::from_mask(gt[i].mask, ci)));
    }
    std::printf("dice,%zu,%.6f\n", c, mean_std(d).mean);
    std::printf("iou,%zu,%.6f\n", c, mean_std(j).mean);
    std::printf("cldice,%zu,%.6f\n", c, mean_std(cl).mean);
  }
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& pred, const std::string& split) {
  std::vector<SegMask> preds;
  if (!pred.empty()) {
    const auto gt = load_split(data, split, 2);
    const auto pr = load_split(pred, split, 2);
    if (gt.size() != pr.size()) throw ArgumentError("prediction and data sets differ in size");
    for (const auto& p : pr) preds.push_back(p.mask);
    report_eval(preds, gt);
    return 0;
  }
  if (ckpt.empty()) throw ArgumentError("eval needs --ckpt or --pred");
  const TrainConfig tc = train_config_from(KeyValueConfig::load(sidecar(ckpt)));
  const MPTNet net(tc.net, load_checkpoint(ckpt));
  const auto gt = load_split(data, split, tc.net.num_classes);
  for (const auto& s : gt) preds.push_back(predict_labels(net.forward(s.image)));
  report_eval(preds, gt);
  return 0;
}

int run_deform(const std::string& vel_path, int steps, const std::string& image_path, const std::string& out) {
  if (steps < 0) throw ArgumentError("--steps must be >= 0");
  const VelocityField v(load_mtk(vel_path));
  Tensor image = load_mtk(image_path);
  const bool flat = image.rank() == 2;
  if (flat) image = image.reshaped({1, image.dim(0), image.dim(1)});
  if (image.rank() != 3 || image.dim(1) != v.height() || image.dim(2) != v.width()) {
    throw ShapeError("image " + shape_str(image.shape()) + " does not match velocity " + shape_str(v.tensor().shape()));
  }
  const DeformationField phi = exponentiate(v, steps);
  const Tensor jac = jacobian_determinant(phi);
  Tensor warped = deform_features(image, phi);
  if (flat) warped = warped.reshaped({warped.dim(1), warped.dim(2)});

  fs::create_directories(out);
  const fs::path dir(out);
  save_mtk((dir / "deformation.mtk").string(), phi.offsets());
  save_mtk((dir / "jacobian.mtk").string(), jac);
  save_mtk((dir / "warped.mtk").string(), warped);

  const std::size_t h = v.height(), w = v.width();
  Tensor mag({h, w});
  for (std::size_t k = 0; k < h * w; ++k) mag[k] = std::hypot(phi.offsets()[k], phi.offsets()[h * w + k]);
  Tensor first({h, w});
  std::copy_n(warped.ptr(), h * w, first.ptr());
  save_pgm((dir / "deformation.pgm").string(), mag);
  save_pgm((dir / "jacobian.pgm").string(), jac);
  save_pgm((dir / "warped.pgm").string(), first);
  std::printf("min jacobian %.6f, max displacement %.6f\n", min_interior_jacobian(phi, 0), max_norm(phi.offsets()));
  return 0;
}

int run_gradcheck(const std::string& kernel, bool full, std::uint64_t seed, std::optional<double> eps) {
  bool ok = true;
  auto report = [&](const std::string& name, const FdReport& r, double tol) {
    const bool pass = r.max_rel_err < tol;
    ok = ok && pass;
    std::printf("%-18s max_rel_err %.3e over %zu coords (worst %s[%zu]: analytic %.6e numeric %.6e) %s\n",
                name.c_str(), r.max_rel_err, r.checked, r.worst_name.c_str(), r.worst_index, r.analytic, r.numeric,
                pass ? "PASS" : "FAIL");
  };
  if (full) {
    report("network", check_network(gradcheck_network_config(), seed, eps.value_or(1e-3)), kNetworkGradTol);
  } else if (!kernel.empty()) {
    report(kernel, check_kernel(kernel, seed, eps.value_or(1e-5)), kKernelGradTol);
  } else {
    for (const auto& k : gradcheck_kernels()) report(k, check_kernel(k, seed, eps.value_or(1e-5)), kKernelGradTol);
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Morph-patch transformer toolkit"};
  app.require_subcommand(1);

  std::string spec, out, config, data, ckpt, pred, log, kernel, velocity, image, split = "eval";
  bool no_mp = false, no_sca = false, full = false;
  int steps = kDefaultSquaringSteps;
  std::optional<double> eps;
  std::optional<std::uint64_t> seed;

  auto* ph = app.add_subcommand("phantom", "Generate a synthetic vessel dataset");
  ph->add_option("--spec", spec, "Phantom config file")->required();
  ph->add_option("--out", out, "Output directory")->required();
  ph->add_option("--seed", seed, "Override the config seed");

  auto* tr = app.add_subcommand("train", "Train the network");
  tr->add_option("--config", config, "Training config file")->required();
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_flag("--no-mp", no_mp, "Disable the morph path");
  tr->add_flag("--no-sca", no_sca, "Disable semantic clustering attention");
  tr->add_option("--seed", seed, "Override the config seed");
  tr->add_option("--log", log, "CSV log path (default <out>.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or a prediction set");
  ev->add_option("--ckpt", ckpt, "Checkpoint path");
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--pred", pred, "Directory of predicted masks laid out like --data");
  ev->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "eval"}));
  ev->add_option("--seed", seed, "Accepted for uniformity");

  auto* de = app.add_subcommand("deform", "Integrate a velocity field and warp an image");
  de->add_option("--velocity", velocity, "Velocity field [2,H,W]")->required();
  de->add_option("--steps", steps, "Squaring steps");
  de->add_option("--image", image, "Image [C,H,W] or [H,W]")->required();
  de->add_option("--out", out, "Output directory")->required();
  de->add_option("--seed", seed, "Accepted for uniformity");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  auto* kopt = gc->add_option("--kernel", kernel, "Kernel name");
  gc->add_flag("--full", full, "End-to-end network check")->excludes(kopt);
  gc->add_option("--seed", seed, "Input seed");
  gc->add_option("--eps", eps, "Central-difference step")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "mpt: %s\n", e.what());
    return 2;
  }

  try {
    if (*ph) return run_phantom(spec, out, seed);
    if (*tr) return run_train(config, data, out, no_mp, no_sca, seed, log);
    if (*ev) return run_eval(ckpt, data, pred, split);
    if (*de) return run_deform(velocity, steps, image, out);
    if (*gc) return run_gradcheck(kernel, full, seed.value_or(0), eps);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mpt: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
