#pragma once

// Central-difference verification of reverse-mode gradients. The function
// under test is re-run from scratch for every probe, so it must be a pure
// function of the leased parameters (seed any internal randomness per call).

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rae/autodiff.hpp"
#include "rae/rng.hpp"
#include "rae/tensor.hpp"

namespace rae {

template <class T>
using CheckedFn = std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates probed per parameter; all of them when the parameter is
  // smaller than the cap.
  std::size_t max_coords_per_param = 16;
  std::uint64_t sample_seed = 0x5eed;
  // Relative error denominator floor: keeps finite-difference noise on
  // near-zero gradients from registering as disagreement.
  double scale_floor = 1e-4;
};

// Max relative error between analytic and central-difference gradients over
// sampled coordinates of every parameter.
template <class T>
double grad_check(const CheckedFn<T>& f, std::vector<Tensor<T>> params, const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0) || opt.eps > 1e-2) throw ContractError("grad_check: eps must be in (0, 1e-2]");

  auto eval = [&](const std::vector<Tensor<T>>& p) {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    vars.reserve(p.size());
    for (const auto& t : p) vars.push_back(tape.leaf(t, true));
    return static_cast<double>(f(tape, vars).value().item());
  };

  // Analytic gradients from one backward pass.
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& t : params) vars.push_back(tape.leaf(t, true));
    Var<T> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  Rng rng(opt.sample_seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t n = params[p].size();
    std::vector<std::size_t> coords;
    if (n <= opt.max_coords_per_param) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_coords_per_param; ++i)
        coords.push_back(static_cast<std::size_t>(rng.randint(n)));
    }
    for (std::size_t ci : coords) {
      const T saved = params[p][ci];
      params[p][ci] = saved + static_cast<T>(opt.eps);
      const double up = eval(params);
      params[p][ci] = saved - static_cast<T>(opt.eps);
      const double down = eval(params);
      params[p][ci] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = static_cast<double>(analytic[p][ci]);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.scale_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace rae
