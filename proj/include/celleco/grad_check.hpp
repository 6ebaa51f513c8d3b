#pragma once

// Central-difference gradient oracle. Independent of the tape's adjoint
// path: it only re-runs the forward closure at perturbed inputs.

#include <functional>
#include <stdexcept>

#include "celleco/tape.hpp"

namespace celleco {

// f builds a scalar output from a single leaf on a fresh tape.
// Returns max over entries of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<Var(Tape&, Var)>& f,
                         const Tensor& x, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");

  Tape tape;
  Var leaf = tape.leaf(x);
  Var out = f(tape, leaf);
  if (tape.val(out).size() != 1)
    throw std::invalid_argument("grad_check: f must be scalar-valued");
  tape.backward(out);
  const Tensor analytic = tape.grad(leaf);

  auto eval = [&](const Tensor& xp) {
    Tape t;
    Var l = t.leaf(xp);
    return t.val(f(t, l)).value();
  };

  double worst = 0.0;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + eps;
    double fp = eval(xp);
    xp[i] = x[i] - eps;
    double fm = eval(xp);
    xp[i] = x[i];
    double numeric = (fp - fm) / (2.0 * eps);
    double rel = std::abs(analytic[i] - numeric) /
                 std::max(1.0, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// Multi-leaf variant: perturbs every tensor in xs.
inline double grad_check_multi(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<Tensor>& xs, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");

  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(xs.size());
  for (const auto& x : xs) leaves.push_back(tape.leaf(x));
  Var out = f(tape, leaves);
  if (tape.val(out).size() != 1)
    throw std::invalid_argument("grad_check: f must be scalar-valued");
  tape.backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(xs.size());
  for (Var l : leaves) analytic.push_back(tape.grad(l));

  auto eval = [&](const std::vector<Tensor>& pert) {
    Tape t;
    std::vector<Var> ls;
    ls.reserve(pert.size());
    for (const auto& x : pert) ls.push_back(t.leaf(x));
    return t.val(f(t, ls)).value();
  };

  double worst = 0.0;
  std::vector<Tensor> pert = xs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      double keep = pert[k][i];
      pert[k][i] = keep + eps;
      double fp = eval(pert);
      pert[k][i] = keep - eps;
      double fm = eval(pert);
      pert[k][i] = keep;
      double numeric = (fp - fm) / (2.0 * eps);
      double rel = std::abs(analytic[k][i] - numeric) /
                   std::max(1.0, std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace celleco
