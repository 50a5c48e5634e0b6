#pragma once

#include <functional>
#include <span>

#include "rtta/tensor.hpp"

namespace rtta::testing {

// A scalar-valued graph over a list of inputs; used to compare reverse-mode
// gradients against the finite-difference oracle.
using GraphFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// Keeps values away from the ReLU kink so the central difference stays on one
// side of it.
inline Tensor random_tensor_off_kink(Shape shape, Rng& rng, double margin = 1e-3) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (auto& v : t.values) {
    if (std::abs(v) < margin) v = v < 0.0 ? -margin : margin;
  }
  return t;
}

inline double eval_graph(const GraphFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Tensor> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.variable(in.shape, in.values));
  return f(tape, vars).values[0];
}

// Max relative error between backprop and central differences, over every
// input of the graph.
inline double grad_vs_fd(const GraphFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                         double floor = 1e-4) {
  Tape tape;
  std::vector<Tensor> vars;
  vars.reserve(inputs.size());
  for (const auto& in : inputs) vars.push_back(tape.variable(in.shape, in.values));
  const Tensor loss = f(tape, vars);
  const GradientMap gm = tape.backprop(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto got = gm.at(vars[i]);
    const auto fd = finite_difference_grad(
        [&](std::span<const double> v) {
          auto modified = inputs;
          modified[i].values.assign(v.begin(), v.end());
          return eval_graph(f, modified);
        },
        inputs[i].values, h);
    worst = std::max(worst, max_rel_error(got, fd, floor));
  }
  return worst;
}

}  // namespace rtta::testing
