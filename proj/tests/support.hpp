#pragma once
// Shared helpers for the unit tests and the acceptance binary: hand-rolled
// random generators and central finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aird/aird.hpp"

namespace aird::test {

inline Tensor uniform_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor normal_tensor(Rng& rng, Shape s, double sd = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

// Magnitudes in [lo, hi] with random sign, so kinks at zero are never within a
// finite-difference step.
inline Tensor away_from_zero(Rng& rng, Shape s, double lo = 0.05, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

// Distinct values spaced at least `gap` apart, in shuffled order.
inline Tensor spread_tensor(Rng& rng, Shape s, double gap = 0.01) {
  Tensor t(std::move(s));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<double>(i) + rng.uniform(0.2, 0.8)) * gap;
  rng.shuffle(v);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

inline std::vector<std::size_t> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<std::size_t> l(n);
  for (auto& v : l) v = rng.index(classes);
  return l;
}

// Error measure used by every gradient check: |a − n| / max(|a|, |n|, floor).
// The floor keeps round-off in near-zero components from reading as relative error.
inline constexpr double kGradFloor = 1e-4;
inline constexpr double kFdStep = 1e-5;

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradFloor});
}

inline double weighted(const Tensor& out, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
  return s;
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Max relative error between autodiff and central differences of
/// Σ w ⊙ f(inputs), with w a fixed random projection.
inline double grad_check(const Builder& f, std::vector<Tensor> inputs, Rng& rng) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  Var out = f(g, vars);
  const Tensor w = uniform_tensor(rng, out.shape());
  g.backward(sum(mul(out, g.constant(w))));

  auto eval = [&] {
    Graph h;
    std::vector<Var> vs;
    for (const auto& t : inputs) vs.push_back(h.constant(t));
    return weighted(f(h, vs).value(), w);
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto ga = g.grad(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + kFdStep;
      const double up = eval();
      inputs[k][i] = x0 - kFdStep;
      const double down = eval();
      inputs[k][i] = x0;
      const double num = (up - down) / (2.0 * kFdStep);
      worst = std::max(worst, rel_err(ga.empty() ? 0.0 : ga[i], num));
    }
  }
  return worst;
}

/// Same check for gradients accumulated into bound parameter tensors.
/// `f` must record every parameter through Graph::param.
inline double param_grad_check(const std::function<Var(Graph&)>& f, const std::vector<Tensor*>& params) {
  for (auto* p : params) {
    p->set_requires_grad();
    p->zero_grad();
  }
  {
    Graph g;
    Var loss = f(g);
    g.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto* p : params) {
    analytic.emplace_back(p->size(), 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.back().begin());
  }
  auto eval = [&] {
    Graph h;
    return f(h).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k]->size(); ++i) {
      double& x = (*params[k])[i];
      const double x0 = x;
      x = x0 + kFdStep;
      const double up = eval();
      x = x0 - kFdStep;
      const double down = eval();
      x = x0;
      worst = std::max(worst, rel_err(analytic[k][i], (up - down) / (2.0 * kFdStep)));
    }
  for (auto* p : params) p->zero_grad();
  return worst;
}

// Full c-class KL(softmax(t) ‖ softmax(s)), computed directly.
inline double full_kl(std::span<const double> t, std::span<const double> s) {
  auto softmax = [](std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) sum += p[i] = std::exp(z[i] - m);
    for (auto& v : p) v /= sum;
    return p;
  };
  const auto pt = softmax(t), ps = softmax(s);
  double kl = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i)
    if (pt[i] > 0.0) kl += pt[i] * (std::log(pt[i]) - std::log(ps[i]));
  return kl;
}

inline std::span<const double> row(const Tensor& t, std::size_t i) {
  const std::size_t c = t.dim(1);
  return t.data().subspan(i * c, c);
}

// A network small enough for exhaustive finite differences.
inline Architecture tiny_arch(std::size_t classes = 3) { return {8, {2, 3}, 4, classes, 0.35, 16.0}; }

}  // namespace aird::test
