#include "sigma/language.hpp"

#include <cmath>
#include <sstream>

#include "sigma/errors.hpp"

namespace sigma::lang {

namespace {

std::vector<std::string> split_words(const std::string& command) {
  std::istringstream ss(command);
  std::vector<std::string> words;
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

}  // namespace

Var encode_text(Graph& g, ParamStore& ps, const SigmaConfig& cfg, const Vocabulary& vocab,
                const std::string& command) {
  std::vector<std::string> words = split_words(command);
  Tensor one_hot({cfg.n_t, vocab.size()});
  for (std::size_t t = 0; t < cfg.n_t; ++t) {
    std::size_t idx = t < words.size() ? vocab.index_of(words[t]) : vocab.pad_index();
    one_hot(t, idx) = 1.0;
  }
  return g.matmul(g.input(std::move(one_hot)), g.param(ps, "text.proj"));
}

Var backbone_forward(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var text_tokens,
                     Var vision_tokens, Var state_tokens, const BackboneOptions& opt) {
  Var text = g.add_row(text_tokens, g.param(ps, "lm.segment.text"));
  Var vis = g.add_row(vision_tokens, g.param(ps, "lm.segment.vision"));
  Var state = g.add_row(state_tokens, g.param(ps, "lm.segment.state"));
  Var x = g.concat_rows({text, vis, state});
  BlockOptions bo;
  bo.use_lora = true;
  bo.lora_dropout = opt.lora_dropout;
  bo.dropout_rng = opt.dropout_rng;
  for (std::size_t i = 0; i < cfg.lm_blocks; ++i) {
    x = transformer_block(g, ps, cfg, x, "lm.block" + std::to_string(i), bo);
  }
  return x;
}

Var read_semantic_factors(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden) {
  Var q = g.param(ps, "heads.sem.queries");
  Var k = g.matmul(hidden, g.param(ps, "heads.sem.wk"));
  Var v = g.matmul(hidden, g.param(ps, "heads.sem.wv"));
  Var attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(double(cfg.d_model))));
  return g.matmul(attn, v);
}

MemoryUpdate update_memory(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m_prev,
                           Var z_pool) {
  (void)cfg;
  Var u = g.gelu(g.affine(z_pool, g.param(ps, "heads.mem.wu"), g.param(ps, "heads.mem.bu")));
  Var lam = g.sigmoid(g.affine(g.concat_cols({m_prev, z_pool}), g.param(ps, "heads.mem.wl"),
                               g.param(ps, "heads.mem.bl")));
  Var keep = g.mul(lam, m_prev);
  Var take = g.mul(g.add_const(g.scale(lam, -1.0), 1.0), u);
  return {g.add(keep, take), lam};
}

namespace {

Var attention_pool(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var tokens,
                   const std::string& prefix) {
  Var q = g.param(ps, prefix + ".q");
  Var scores = g.scale(g.matmul_nt(q, tokens), 1.0 / std::sqrt(double(cfg.d_model)));
  Var pooled = g.matmul(g.softmax_rows(scores), tokens);
  return g.affine(pooled, g.param(ps, prefix + ".w"), g.param(ps, prefix + ".b"));
}

}  // namespace

Summaries summarize(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden) {
  Var text_rows = g.slice_rows(hidden, 0, cfg.n_t);
  return {attention_pool(g, ps, cfg, hidden, "heads.sum_env"),
          attention_pool(g, ps, cfg, hidden, "heads.sum_beh"),
          attention_pool(g, ps, cfg, text_rows, "heads.sum_text")};
}

Var infer_intent(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m, Var c_env, Var c_beh) {
  (void)cfg;
  Var x = g.concat_cols({m, c_env, c_beh});
  Var h = g.gelu(g.affine(x, g.param(ps, "heads.intent.w1"), g.param(ps, "heads.intent.b1")));
  return g.affine(h, g.param(ps, "heads.intent.w2"), g.param(ps, "heads.intent.b2"));
}

Var project_telepathy(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var m, Var z_intent,
                      Var c_env, Var c_beh, Var z_pool, Var c_text) {
  (void)cfg;
  Var x = g.concat_cols({m, z_intent, c_env, c_beh, z_pool, c_text});
  Var h = g.gelu(g.affine(x, g.param(ps, "heads.tau.w1"), g.param(ps, "heads.tau.b1")));
  return g.affine(h, g.param(ps, "heads.tau.w2"), g.param(ps, "heads.tau.b2"));
}

Var pool_high_level(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden) {
  (void)cfg;
  return g.affine(g.mean_rows(hidden), g.param(ps, "lm.pool.w"), g.param(ps, "lm.pool.b"));
}

Var modulate_language(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var hidden, Var tau) {
  Var bias = g.matmul(tau, g.param(ps, "heads.lmod.w_tau"));
  Var gated = g.mul(g.sigmoid(g.param(ps, "heads.lmod.g_ch")), bias);
  Var scaled = g.scale_by(gated, g.exp_elem(g.param(ps, "heads.lmod.theta_lm")));
  return pool_high_level(g, ps, cfg, g.add_row(hidden, scaled));
}

}  // namespace sigma::lang
