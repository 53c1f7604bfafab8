#include "sigma/action.hpp"

#include <algorithm>
#include <cmath>

#include "sigma/errors.hpp"
#include "sigma/language.hpp"
#include "sigma/random.hpp"
#include "sigma/vision.hpp"

namespace sigma::action {

Var project_condition(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high, Var tau) {
  (void)cfg;
  Var x = g.concat_cols({n_high, tau});
  Var h = g.gelu(g.affine(x, g.param(ps, "act.cond.w1"), g.param(ps, "act.cond.b1")));
  return g.affine(h, g.param(ps, "act.cond.w2"), g.param(ps, "act.cond.b2"));
}

Var project_condition_base(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high) {
  return project_condition(g, ps, cfg, n_high, g.input(Tensor::zeros({1, cfg.d_t})));
}

Var generate_queries(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var c_act,
                     Var state_tokens) {
  Var s_proj = g.matmul(state_tokens, g.param(ps, "act.query.ws"));
  Var seeds = g.param(ps, "act.query.seeds");
  Var attended = multihead_attention(g, seeds, s_proj, g.param(ps, "act.query.attn.wq"),
                                     g.param(ps, "act.query.attn.wk"),
                                     g.param(ps, "act.query.attn.wv"),
                                     g.param(ps, "act.query.attn.wo"), cfg.heads);
  Var bias = g.affine(c_act, g.param(ps, "act.query.bias_w"), g.param(ps, "act.query.bias_b"));
  Var q1 = g.add_row(attended, bias);
  Var refined = transformer_block(g, ps, cfg, q1, "act.query.block");
  return g.layer_norm(refined, g.param(ps, "act.query.ln_g"), g.param(ps, "act.query.ln_b"));
}

Var head_vector(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries) {
  (void)cfg;
  Var pooled = g.mean_rows(queries);
  return g.affine(pooled, g.param(ps, "act.head_vec.w"), g.param(ps, "act.head_vec.b"));
}

Var head_chunk(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries) {
  Var pooled = g.mean_rows(queries);
  Var flat = g.affine(pooled, g.param(ps, "act.head_chunk.w"), g.param(ps, "act.head_chunk.b"));
  return g.reshape(flat, cfg.chunk_c, cfg.d_a);
}

Var denoise_trajectory(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries, Var n_high,
                       Var c_act, std::size_t steps, std::uint64_t seed) {
  if (steps < 1) throw ConfigError("denoise_trajectory needs steps >= 1");
  std::size_t traj_dim = cfg.horizon_t * cfg.d_a;
  Rng rng(derive_seed(seed, "denoise"));
  Var x = g.input(normal_tensor(rng, {1, traj_dim}, cfg.denoise_noise_std));
  Var pooled_q = g.mean_rows(queries);
  for (std::size_t k = 0; k < steps; ++k) {
    Var step = g.input(Tensor::scalar((double(k) + 1.0) / double(steps)));
    Var inp = g.concat_cols({x, step, pooled_q, n_high, c_act});
    Var h = g.gelu(g.affine(inp, g.param(ps, "act.denoise.w1"), g.param(ps, "act.denoise.b1")));
    Var delta = g.affine(h, g.param(ps, "act.denoise.w2"), g.param(ps, "act.denoise.b2"));
    x = g.add(x, delta);
  }
  return g.reshape(x, cfg.horizon_t, cfg.d_a);
}

Residuals residual_head(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high, Var tau) {
  Var x = g.concat_cols({n_high, tau});
  Var h = g.gelu(g.affine(x, g.param(ps, "heads.residual.w1"), g.param(ps, "heads.residual.b1")));
  Var flat = g.affine(h, g.param(ps, "heads.residual.w2"), g.param(ps, "heads.residual.b2"));
  std::size_t da = cfg.d_a, chunk = cfg.chunk_c * da, traj = cfg.horizon_t * da;
  Residuals r;
  r.d_vec = g.slice_cols(flat, 0, da);
  r.d_chunk = g.reshape(g.slice_cols(flat, da, da + chunk), cfg.chunk_c, da);
  r.d_traj = g.reshape(g.slice_cols(flat, da + chunk, da + chunk + traj), cfg.horizon_t, da);
  return r;
}

MotorCommand fuse_and_drive(const Tensor& final_vec, const Tensor& final_chunk,
                            const Tensor& final_traj, const SigmaConfig& cfg) {
  double wsum = cfg.fuse_w_vec + cfg.fuse_w_chunk + cfg.fuse_w_traj;
  if (std::fabs(wsum - 1.0) > 1e-9) {
    throw ConfigError("fusion weights sum to " + std::to_string(wsum) + ", expected 1");
  }
  std::size_t da = cfg.d_a;
  MotorCommand out;
  out.u = Tensor({da});
  for (std::size_t j = 0; j < da; ++j) {
    out.u[j] = cfg.fuse_w_vec * final_vec[j] + cfg.fuse_w_chunk * final_chunk(0, j) +
               cfg.fuse_w_traj * final_traj(0, j);
  }
  out.m = out.u;
  for (std::size_t j = 0; j < da; ++j) {
    out.m[j] = std::clamp(out.m[j], -cfg.joint_limit, cfg.joint_limit);
  }
  return out;
}

Tensor window_features(const shards::WindowSample& sample, const SigmaConfig& cfg) {
  const Tensor& v = sample.vision_inputs;
  if (v.rank() != 3 || v.shape()[1] != cfg.n_f || v.shape()[2] != cfg.d_feat) {
    throw DimensionError("vision_inputs " + v.shape_str() + " does not match configuration");
  }
  Tensor out({cfg.n_f, cfg.d_feat});
  std::copy(v.data().begin(), v.data().begin() + static_cast<long>(out.size()),
            out.data().begin());
  return out;
}

Tensor window_state(const shards::WindowSample& sample, const SigmaConfig& cfg) {
  const Tensor& s = sample.robot_state;
  if (s.rank() != 2 || s.cols() != cfg.d_s) {
    throw DimensionError("robot_state " + s.shape_str() + " does not match configuration");
  }
  Tensor out({cfg.d_s});
  std::copy(s.data().begin(), s.data().begin() + static_cast<long>(cfg.d_s), out.data().begin());
  return out;
}

PolicyVars forward_policy_vars(Graph& g, SigmaModel& model, const shards::WindowSample& sample,
                               Var m_prev, const ForwardOptions& opt) {
  ParamStore& ps = model.params();
  const SigmaConfig& cfg = model.config();
  PolicyVars out;
  out.telepathy_on = opt.telepathy_on;

  // Shared encoders.
  Var text = lang::encode_text(g, ps, cfg, model.vocab(), sample.text);
  Var state_tokens = vision::encode_state(g, ps, cfg, g.input(window_state(sample, cfg)));
  Var features = vision::project_features(g, ps, cfg, g.input(window_features(sample, cfg)));
  Var v_base = vision::resample(g, ps, cfg, features);

  lang::BackboneOptions bb;
  bb.lora_dropout = opt.lora_dropout;
  bb.dropout_rng = opt.dropout_rng;

  // Pass 1: no modulation anywhere; produces the telepathy state.
  Var vision_tokens1 = vision::refine(g, ps, cfg, v_base);
  Var hidden1 = lang::backbone_forward(g, ps, cfg, text, vision_tokens1, state_tokens, bb);
  Var z_sem = lang::read_semantic_factors(g, ps, cfg, hidden1);
  Var z_pool = g.mean_rows(z_sem);
  lang::MemoryUpdate mem = lang::update_memory(g, ps, cfg, m_prev, z_pool);
  lang::Summaries sums = lang::summarize(g, ps, cfg, hidden1);
  Var z_intent = lang::infer_intent(g, ps, cfg, mem.m, sums.c_env, sums.c_beh);
  Var tau = lang::project_telepathy(g, ps, cfg, mem.m, z_intent, sums.c_env, sums.c_beh, z_pool,
                                    sums.c_text);
  Var n_high_base = lang::pool_high_level(g, ps, cfg, hidden1);

  out.tau = tau;
  out.m = mem.m;
  out.z_intent = z_intent;
  out.c_env = sums.c_env;
  out.c_beh = sums.c_beh;
  out.c_text = sums.c_text;
  out.z_sem = z_sem;
  out.z_pool = z_pool;
  out.n_high_base = n_high_base;
  out.text_pool = g.mean_rows(text);
  out.vision_pool = g.mean_rows(v_base);

  // Baseline branch; never reads tau.
  out.c_act_base = project_condition_base(g, ps, cfg, n_high_base);
  Var q_base = generate_queries(g, ps, cfg, out.c_act_base, state_tokens);
  out.base_vec = head_vector(g, ps, cfg, q_base);
  out.base_chunk = head_chunk(g, ps, cfg, q_base);
  out.base_traj = denoise_trajectory(g, ps, cfg, q_base, n_high_base, out.c_act_base,
                                     cfg.denoise_steps, opt.noise_seed);

  if (!opt.telepathy_on) {
    out.final_vec = out.base_vec;
    out.final_chunk = out.base_chunk;
    out.final_traj = out.base_traj;
    return out;
  }

  // Pass 2: FiLM-modulated vision feeds the backbone again; tau is the
  // pass-1 factor throughout.
  vision::FilmResult film = vision::film_modulate(g, ps, cfg, v_base, tau);
  Var vision_tokens2 = vision::refine(g, ps, cfg, film.v_mod);
  Var hidden2 = lang::backbone_forward(g, ps, cfg, text, vision_tokens2, state_tokens, bb);
  Var n_high_mod = lang::modulate_language(g, ps, cfg, hidden2, tau);
  out.n_high_mod = n_high_mod;
  out.c_act_tel = project_condition(g, ps, cfg, n_high_mod, tau);

  Residuals res = residual_head(g, ps, cfg, n_high_mod, tau);
  out.d_vec = res.d_vec;
  out.d_chunk = res.d_chunk;
  out.d_traj = res.d_traj;
  out.final_vec = g.add(out.base_vec, res.d_vec);
  out.final_chunk = g.add(out.base_chunk, res.d_chunk);
  out.final_traj = g.add(out.base_traj, res.d_traj);
  return out;
}

PolicyResult forward_policy(SigmaModel& model, const shards::WindowSample& sample,
                            const Tensor& m_prev, const ForwardOptions& opt) {
  Graph g;
  Var m0 = g.input(m_prev.size() == model.config().d_model
                       ? m_prev
                       : Tensor::zeros({1, model.config().d_model}));
  PolicyVars vars = forward_policy_vars(g, model, sample, m0, opt);

  PolicyResult out;
  const SigmaConfig& cfg = model.config();
  out.bundle.base_vec = g.value(vars.base_vec).reshaped({cfg.d_a});
  out.bundle.base_chunk = g.value(vars.base_chunk);
  out.bundle.base_traj = g.value(vars.base_traj);
  out.bundle.final_vec = g.value(vars.final_vec).reshaped({cfg.d_a});
  out.bundle.final_chunk = g.value(vars.final_chunk);
  out.bundle.final_traj = g.value(vars.final_traj);
  if (opt.telepathy_on) {
    out.bundle.d_vec = g.value(vars.d_vec).reshaped({cfg.d_a});
    out.bundle.d_chunk = g.value(vars.d_chunk);
    out.bundle.d_traj = g.value(vars.d_traj);
    out.bundle.c_act = g.value(vars.c_act_tel).reshaped({cfg.d_model});
  } else {
    out.bundle.d_vec = Tensor::zeros({cfg.d_a});
    out.bundle.d_chunk = Tensor::zeros({cfg.chunk_c, cfg.d_a});
    out.bundle.d_traj = Tensor::zeros({cfg.horizon_t, cfg.d_a});
    out.bundle.c_act = g.value(vars.c_act_base).reshaped({cfg.d_model});
  }
  out.bundle.tau = g.value(vars.tau).reshaped({cfg.d_t});

  out.state.tau = out.bundle.tau;
  out.state.m = g.value(vars.m).reshaped({cfg.d_model});
  out.state.z_intent = g.value(vars.z_intent).reshaped({cfg.d_model});
  out.state.c_env = g.value(vars.c_env).reshaped({cfg.d_model});
  out.state.c_beh = g.value(vars.c_beh).reshaped({cfg.d_model});
  out.state.c_text = g.value(vars.c_text).reshaped({cfg.d_model});
  out.state.z_sem = g.value(vars.z_sem);
  out.state.z_pool = g.value(vars.z_pool).reshaped({cfg.d_model});
  out.m_next = g.value(vars.m);
  return out;
}

}  // namespace sigma::action
