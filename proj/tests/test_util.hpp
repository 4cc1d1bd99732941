#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bip/nn.hpp"

namespace bip::testutil {

// Flattened read/write access to every parameter of an Mlp, for
// finite-difference oracles.
inline std::vector<double*> param_ptrs(nn::Mlp& net) {
  std::vector<double*> out;
  for (auto& l : net.layers) {
    for (auto& v : l.w.data()) out.push_back(&v);
    for (auto& v : l.b) out.push_back(&v);
  }
  return out;
}

inline std::vector<double> flatten_grad(const nn::Grad& g) {
  std::vector<double> out;
  for (const auto& l : g.layers) {
    out.insert(out.end(), l.w.data().begin(), l.w.data().end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  }
  return out;
}

/// Central finite differences of a scalar function of the parameters.
inline std::vector<double> fd_param_gradient(nn::Mlp& net,
                                             const std::function<double()>& loss,
                                             double h = 1e-5) {
  auto ptrs = param_ptrs(net);
  std::vector<double> g(ptrs.size());
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const double orig = *ptrs[i];
    *ptrs[i] = orig + h;
    const double fp = loss();
    *ptrs[i] = orig - h;
    const double fm = loss();
    *ptrs[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max relative error with absolute floor, for gradient comparisons.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                          double atol = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), atol});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace bip::testutil
