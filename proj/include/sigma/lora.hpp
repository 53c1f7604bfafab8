#pragma once

#include "sigma/graph.hpp"

namespace sigma::train {

struct LoraOptions {
  double alpha = 16.0;
  std::size_t rank = 8;
  double dropout = 0.0;  // low-rank path only, training time only
  Rng* rng = nullptr;
};

// y = x W_base + (alpha/r) x A B. W_base stays frozen; A is Gaussian at init
// and B starts at zero so the wrapped layer is the identity delta.
Var lora_apply(Graph& g, Var x, Var w_base, Var a, Var b, const LoraOptions& opt);

}  // namespace sigma::train
