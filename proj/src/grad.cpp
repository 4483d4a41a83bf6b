#include "mpt/grad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace mpt {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ArgumentError("duplicate parameter '" + name + "'");
  Entry e;
  e.name = name;
  e.grad = Tensor::zeros_like(value);
  e.m = Tensor::zeros_like(value);
  e.v = Tensor::zeros_like(value);
  e.value = std::move(value);
  e.value.set_name(name);
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

void ParamStore::accumulate(const std::string& name, const Tensor& g, double s) {
  Entry& e = entry(name);
  if (g.shape() != e.value.shape()) {
    throw ShapeError("gradient for '" + name + "' has shape " + shape_str(g.shape()) + ", expected " +
                     shape_str(e.value.shape()));
  }
  axpy(e.grad, g, s);
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

void adam_step(ParamStore& store, const AdamOptions& opt) {
  for (auto& e : store.entries()) {
    ++e.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(e.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(e.step));
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      e.m[i] = opt.beta1 * e.m[i] + (1.0 - opt.beta1) * g;
      e.v[i] = opt.beta2 * e.v[i] + (1.0 - opt.beta2) * g * g;
      const double mhat = e.m[i] / c1;
      const double vhat = e.v[i] / c2;
      e.value[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    e.grad.fill(0.0);
  }
}

// ---- checkpoints ------------------------------------------------------------

void write_checkpoint(std::ostream& os, const ParamStore& store) {
  os.write("MPCK", 4);
  const auto count = static_cast<std::uint32_t>(store.entries().size());
  os.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xFFFF) throw ArgumentError("parameter name too long: " + e.name);
    const auto len = static_cast<std::uint16_t>(e.name.size());
    os.write(reinterpret_cast<const char*>(&len), 2);
    os.write(e.name.data(), len);
    write_mtk(os, e.value);
  }
}

ParamStore read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MPCK", 4) != 0) throw FormatError("MPCK: bad magic");
  std::uint32_t count = 0;
  is.read(reinterpret_cast<char*>(&count), 4);
  if (!is) throw FormatError("MPCK: truncated header");
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 2);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw FormatError("MPCK: truncated entry name");
    store.add(name, read_mtk(is));
  }
  return store;
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(os, store);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---- finite differences -----------------------------------------------------

FdReport finite_diff_check(const std::function<double()>& f, const std::vector<FdTarget>& targets, double eps,
                           std::size_t max_coords, std::uint64_t seed, FdStencil stencil) {
  std::mt19937_64 rng(seed);
  FdReport rep;
  auto eval = [&]() {
    const double v = f();
    if (!std::isfinite(v)) throw FormatError("finite_diff_check: objective is not finite");
    return v;
  };
  for (const auto& t : targets) {
    if (!t.value || !t.analytic) throw ArgumentError("finite_diff_check: null target '" + t.name + "'");
    if (t.value->shape() != t.analytic->shape()) {
      throw ShapeError("finite_diff_check: gradient shape mismatch for '" + t.name + "'");
    }
    std::vector<std::size_t> idx(t.value->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_coords);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      double& x = (*t.value)[i];
      const double saved = x;
      auto at = [&](double step) {
        x = saved + step;
        return eval();
      };
      double num = 0.0;
      if (stencil == FdStencil::central4) {
        const double d1 = at(eps) - at(-eps), d2 = at(2.0 * eps) - at(-2.0 * eps);
        num = (8.0 * d1 - d2) / (12.0 * eps);
      } else {
        num = (at(eps) - at(-eps)) / (2.0 * eps);
      }
      x = saved;
      const double ana = (*t.analytic)[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      ++rep.checked;
      if (rel > rep.max_rel_err || rep.worst_name.empty()) {
        if (rel >= rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_name = t.name;
          rep.worst_index = i;
          rep.analytic = ana;
          rep.numeric = num;
        }
      }
    }
  }
  return rep;
}

FdReport finite_diff_check(const std::function<double()>& f, ParamStore& store, double eps,
                           std::size_t max_coords, std::uint64_t seed, FdStencil stencil) {
  std::vector<FdTarget> targets;
  for (auto& e : store.entries()) targets.push_back({e.name, &e.value, &e.grad});
  return finite_diff_check(f, targets, eps, max_coords, seed, stencil);
}

}  // namespace mpt
