#include "sigma/vision.hpp"

#include <cmath>

#include "sigma/errors.hpp"

namespace sigma::vision {

Var project_features(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var raw_features) {
  const Tensor& f = g.value(raw_features);
  if (f.cols() != cfg.d_feat) {
    throw DimensionError("vision features have width " + std::to_string(f.cols()) +
                         ", expected d_feat " + std::to_string(cfg.d_feat));
  }
  Var h = g.gelu(g.affine(raw_features, g.param(ps, "vision.proj.w1"), g.param(ps, "vision.proj.b1")));
  return g.affine(h, g.param(ps, "vision.proj.w2"), g.param(ps, "vision.proj.b2"));
}

Var encode_state(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var robot_state) {
  const Tensor& s = g.value(robot_state);
  if (s.size() != cfg.d_s) {
    throw DimensionError("robot state has dimension " + std::to_string(s.size()) + ", expected " +
                         std::to_string(cfg.d_s));
  }
  Var h = g.gelu(g.affine(robot_state, g.param(ps, "state.mlp.w1"), g.param(ps, "state.mlp.b1")));
  Var compressed = g.affine(h, g.param(ps, "state.mlp.w2"), g.param(ps, "state.mlp.b2"));
  std::vector<Var> tokens;
  tokens.reserve(cfg.n_s);
  for (std::size_t i = 0; i < cfg.n_s; ++i) {
    tokens.push_back(g.affine(compressed, g.param(ps, "state.expand.w" + std::to_string(i)),
                              g.param(ps, "state.expand.b" + std::to_string(i))));
  }
  return g.concat_rows(tokens);
}

Var resample(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var features) {
  const Tensor& f = g.value(features);
  if (f.rows() == 0) throw InputError("resample: empty feature sequence");
  if (f.cols() != cfg.d_model) {
    throw DimensionError("resample expects d_model features, got " + f.shape_str());
  }
  Var queries = g.param(ps, "vision.resample.queries");
  Var q = g.matmul(queries, g.param(ps, "vision.resample.wq"));
  Var k = g.matmul(features, g.param(ps, "vision.resample.wk"));
  Var v = g.matmul(features, g.param(ps, "vision.resample.wv"));
  // Single-head form with full-width scale, then FFN(LN(Q + H)).
  Var attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(double(cfg.d_model))));
  Var h = g.matmul(attn, v);
  Var mixed = g.layer_norm(g.add(queries, h), g.param(ps, "vision.resample.ln_g"),
                           g.param(ps, "vision.resample.ln_b"));
  Var ffn = g.affine(
      g.gelu(g.affine(mixed, g.param(ps, "vision.resample.ffn.w1"),
                      g.param(ps, "vision.resample.ffn.b1"))),
      g.param(ps, "vision.resample.ffn.w2"), g.param(ps, "vision.resample.ffn.b2"));
  return ffn;
}

FilmResult film_modulate(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var v_base, Var tau) {
  const Tensor& t = g.value(tau);
  if (t.size() != cfg.d_t) {
    throw DimensionError("telepathy factor has length " + std::to_string(t.size()) +
                         ", expected d_t " + std::to_string(cfg.d_t));
  }
  Var tau_scaled = g.scale_by(tau, g.exp_elem(g.param(ps, "heads.gate.theta_tau")));
  Var h = g.gelu(g.affine(tau_scaled, g.param(ps, "heads.film.w1"), g.param(ps, "heads.film.b1")));
  Var gb = g.affine(h, g.param(ps, "heads.film.w2"), g.param(ps, "heads.film.b2"));
  Var gamma = g.slice_cols(gb, 0, cfg.d_model);
  Var beta = g.slice_cols(gb, cfg.d_model, 2 * cfg.d_model);
  Var v_film = g.add_row(g.mul_row(v_base, gamma), beta);
  Var delta = g.sub(v_film, v_base);
  Var v_mod = g.add(v_base, g.scale_by(delta, g.exp_elem(g.param(ps, "heads.gate.theta_mod"))));
  return {v_mod, gamma, beta};
}

Var refine(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var tokens) {
  Var x = tokens;
  for (std::size_t i = 0; i < cfg.vis_blocks; ++i) {
    x = transformer_block(g, ps, cfg, x, "vision.refine.block" + std::to_string(i));
  }
  return x;
}

}  // namespace sigma::vision
