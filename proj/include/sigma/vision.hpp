#pragma once

#include "sigma/model.hpp"

namespace sigma::vision {

// Two-layer MLP from raw feature width onto the shared d_model space.
Var project_features(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var raw_features);

// Robot state -> N_s state tokens: 2-layer MLP then one learned linear map
// per token slot.
Var encode_state(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var robot_state);

// Perceiver-style resampler: learned queries attend over the projected
// feature sequence; fixed output length N_v for any N_f >= 1.
Var resample(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var features);

struct FilmResult {
  Var v_mod;
  Var gamma;
  Var beta;
};

// FiLM modulation by the telepathy factor through the two log-scale gates:
// tau' = e^{theta_tau} tau, [gamma, beta] from an MLP, and
// v_mod = v_base + e^{theta_mod} (v_film - v_base).
FilmResult film_modulate(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var v_base, Var tau);

// Refinement stack of pre-norm self-attention + FFN blocks.
Var refine(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var tokens);

}  // namespace sigma::vision
