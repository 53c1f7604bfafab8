#pragma once

#include <string>

#include "sigma/model.hpp"

namespace sigma::lang {

// One-hot words through the fixed (non-trainable) projection, padded or
// truncated to N_t tokens. Out-of-vocabulary words are an error.
Var encode_text(Graph& g, ParamStore& ps, const SigmaConfig& cfg, const Vocabulary& vocab,
                const std::string& command);

struct BackboneOptions {
  double lora_dropout = 0.0;
  Rng* dropout_rng = nullptr;
};

// Concatenates the three token streams with segment embeddings and runs the
// L_lm pre-norm blocks. The q/k/v/output projections carry the LoRA factors.
Var backbone_forward(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var text_tokens,
                     Var vision_tokens, Var state_tokens, const BackboneOptions& opt = {});

// K learned queries cross-attend to the hidden sequence.
Var read_semantic_factors(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden);

struct MemoryUpdate {
  Var m;       // new memory
  Var lambda;  // elementwise gate in (0,1)
};

// Gated interpolation m_t = lambda . m_prev + (1 - lambda) . u.
MemoryUpdate update_memory(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m_prev,
                           Var z_pool);

struct Summaries {
  Var c_env;
  Var c_beh;
  Var c_text;
};

// Three attention-pooling heads with disjoint parameters; c_text attends only
// to the text segment rows [0, N_t).
Summaries summarize(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden);

Var infer_intent(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m, Var c_env, Var c_beh);

// Concatenation order is normative: [m; z_intent; c_env; c_beh; z_pool; c_text].
Var project_telepathy(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m, Var z_intent,
                      Var c_env, Var c_beh, Var z_pool, Var c_text);

// Mean pool over tokens followed by the (frozen) output map; the unmodulated
// high-level representation.
Var pool_high_level(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden);

// Double-gated bias modulation: hidden + e^{theta_lm} (sigmoid(g_ch) . W_tau tau)
// broadcast over tokens, then pooled as above.
Var modulate_language(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden, Var tau);

}  // namespace sigma::lang
