#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "heightformer/errors.hpp"
#include "heightformer/ops.hpp"
#include "heightformer/random.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates probed per input; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Compares tape gradients of the scalar `fn` against central differences.
///
/// `fn` must rebuild its result from the current values of `inputs`; the
/// checker perturbs those values in place and restores them. Returns the max
/// over probed coordinates of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<Tensor(Tape&)>& fn, const std::vector<Tensor>& inputs,
                         const GradCheckOptions& opts = {}) {
  if (!(opts.eps >= 1e-7 && opts.eps <= 1e-3)) {
    throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  for (const auto& t : inputs) {
    if (!t.requires_grad()) throw ContractError("grad_check: every input must require grad");
    Tensor(t).zero_grad();
  }

  auto evaluate = [&fn](Tape& tape) {
    Tensor out = fn(tape);
    if (auto bad = tape.first_non_finite()) {
      throw GradCheckError("grad_check: non-finite value produced by op '" + *bad + "'");
    }
    if (out.size() != 1) throw ContractError("grad_check: function must return a scalar");
    if (!std::isfinite(out.item())) throw GradCheckError("grad_check: non-finite loss");
    return out;
  };

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = evaluate(tape);
    tape.backward(loss);
    for (const auto& t : inputs) {
      analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                         : std::vector<double>(t.size(), 0.0));
    }
  }

  Rng rng(opts.seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor t = inputs[k];
    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.max_coords && opts.max_coords < coords.size()) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords);
    }
    auto values = t.mutable_values();
    for (auto i : coords) {
      const double orig = values[i];
      values[i] = orig + opts.eps;
      double fp = 0.0, fm = 0.0;
      {
        Tape tape;
        fp = evaluate(tape).item();
      }
      values[i] = orig - opts.eps;
      {
        Tape tape;
        fm = evaluate(tape).item();
      }
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// sum(out * R) for a fixed random R; turns any op into a scalar whose
/// gradient exercises the full vector-Jacobian product.
inline Tensor random_projection(Tape& tape, const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> r(out.size());
  for (auto& v : r) v = rng.uniform(-1.0, 1.0);
  return sum(tape, mul(tape, out, Tensor(out.shape(), std::move(r))));
}

}  // namespace hf
