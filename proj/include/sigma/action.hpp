#pragma once

#include <cstdint>
#include <optional>

#include "sigma/model.hpp"
#include "sigma/shards.hpp"

namespace sigma::action {

// Condition projector P_act on [n_high; tau]; the baseline variant feeds a
// zero telepathy factor.
Var project_condition(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high, Var tau);
Var project_condition_base(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high);

// Q1 = Attn(Q0, S_proj, S_proj) + b(c_act); q_t = LN(Ref(Q1)).
Var generate_queries(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var c_act,
                     Var state_tokens);

Var head_vector(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries);
Var head_chunk(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries);

// Deterministic K-step refinement from a seeded noise trajectory;
// differentiable end to end.
Var denoise_trajectory(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var queries, Var n_high,
                       Var c_act, std::size_t steps, std::uint64_t seed);

struct Residuals {
  Var d_vec;
  Var d_chunk;
  Var d_traj;
};

// One MLP emitting all three residual branches, split and reshaped.
Residuals residual_head(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var n_high, Var tau);

// ---------------------------------------------------------------------------

struct TelepathyState {
  Tensor tau;
  Tensor m;
  Tensor z_intent;
  Tensor c_env;
  Tensor c_beh;
  Tensor c_text;
  Tensor z_sem;
  Tensor z_pool;
};

struct ActionBundle {
  Tensor base_vec, base_chunk, base_traj;
  Tensor d_vec, d_chunk, d_traj;
  Tensor final_vec, final_chunk, final_traj;
  Tensor c_act;
  Tensor tau;
};

struct MotorCommand {
  Tensor u;  // fused control representation
  Tensor m;  // clamped motor command
};

// phi: convex re-weighting of the three branches' first-step action, then the
// low-level clamp to the joint-limit box.
MotorCommand fuse_and_drive(const Tensor& final_vec, const Tensor& final_chunk,
                            const Tensor& final_traj, const SigmaConfig& cfg);

// Graph handles produced by one policy forward; used by the training loss.
struct PolicyVars {
  Var base_vec, base_chunk, base_traj;
  Var d_vec, d_chunk, d_traj;  // invalid when telepathy is off
  Var final_vec, final_chunk, final_traj;
  Var tau, m, z_intent, c_env, c_beh, c_text, z_sem, z_pool;
  Var c_act_base;
  Var c_act_tel;  // invalid when telepathy is off
  Var n_high_base;
  Var n_high_mod;  // invalid when telepathy is off
  Var text_pool, vision_pool;
  bool telepathy_on = false;
};

struct ForwardOptions {
  bool telepathy_on = true;
  std::uint64_t noise_seed = 0;    // denoiser start noise
  double lora_dropout = 0.0;       // > 0 only during training
  Rng* dropout_rng = nullptr;
};

// Two-pass composition: pass 1 runs the unmodulated vision path and the
// language heads to produce the telepathy state; pass 2 (telepathy only)
// re-runs the backbone on FiLM-modulated vision and adds residuals. The
// baseline branch never reads tau.
PolicyVars forward_policy_vars(Graph& g, SigmaModel& model, const shards::WindowSample& sample,
                               Var m_prev, const ForwardOptions& opt);

struct PolicyResult {
  ActionBundle bundle;
  TelepathyState state;
  Tensor m_next;
};

// Convenience wrapper that materializes tensors from one forward pass.
PolicyResult forward_policy(SigmaModel& model, const shards::WindowSample& sample,
                            const Tensor& m_prev, const ForwardOptions& opt);

// Frame-0 slices of a window, the policy's observation.
Tensor window_features(const shards::WindowSample& sample, const SigmaConfig& cfg);
Tensor window_state(const shards::WindowSample& sample, const SigmaConfig& cfg);

}  // namespace sigma::action
