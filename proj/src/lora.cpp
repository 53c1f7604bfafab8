#include "sigma/lora.hpp"

#include <algorithm>

#include "sigma/errors.hpp"

namespace sigma::train {

Var lora_apply(Graph& g, Var x, Var w_base, Var a, Var b, const LoraOptions& opt) {
  const Tensor& wv = g.value(w_base);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (opt.rank < 1) throw ConfigError("LoRA rank must be >= 1");
  if (opt.rank > std::min(wv.rows(), wv.cols())) {
    throw ConfigError("LoRA rank " + std::to_string(opt.rank) + " exceeds min dimension of " +
                      wv.shape_str());
  }
  if (av.cols() != opt.rank || bv.rows() != opt.rank || av.rows() != wv.rows() ||
      bv.cols() != wv.cols()) {
    throw DimensionError("LoRA factors " + av.shape_str() + ", " + bv.shape_str() +
                         " do not bracket " + wv.shape_str());
  }
  Var base = g.matmul(x, w_base);
  Var in = x;
  if (opt.dropout > 0.0) {
    if (!opt.rng) throw ConfigError("LoRA dropout requires an RNG");
    in = g.dropout(in, opt.dropout, *opt.rng);
  }
  Var low = g.matmul(g.matmul(in, a), b);
  return g.add(base, g.scale(low, opt.alpha / static_cast<double>(opt.rank)));
}

}  // namespace sigma::train
