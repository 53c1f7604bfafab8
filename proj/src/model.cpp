#include "sigma/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "sigma/errors.hpp"
#include "sigma/io.hpp"
#include "sigma/lora.hpp"
#include "sigma/random.hpp"

namespace sigma {

void SigmaConfig::validate() const {
  if (d_model == 0 || d_t == 0 || d_a == 0 || d_s == 0) throw ConfigError("zero model dimension");
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (chunk_c > horizon_t) throw ConfigError("chunk_c exceeds horizon_t");
  if (lora_rank < 1 || lora_rank > d_model) throw ConfigError("bad lora_rank");
  if (denoise_steps < 1) throw ConfigError("denoise_steps must be >= 1");
  double wsum = fuse_w_vec + fuse_w_chunk + fuse_w_traj;
  if (std::fabs(wsum - 1.0) > 1e-9) {
    throw ConfigError("fusion weights sum to " + std::to_string(wsum) + ", expected 1");
  }
}

nlohmann::json SigmaConfig::to_json() const {
  return nlohmann::json{{"d_model", d_model},
                        {"d_t", d_t},
                        {"d_feat", d_feat},
                        {"n_f", n_f},
                        {"n_v", n_v},
                        {"n_s", n_s},
                        {"n_t", n_t},
                        {"k_sem", k_sem},
                        {"d_s", d_s},
                        {"d_a", d_a},
                        {"horizon_t", horizon_t},
                        {"chunk_c", chunk_c},
                        {"lm_blocks", lm_blocks},
                        {"vis_blocks", vis_blocks},
                        {"heads", heads},
                        {"n_q", n_q},
                        {"denoise_steps", denoise_steps},
                        {"denoise_hidden", denoise_hidden},
                        {"ffn_hidden", ffn_hidden},
                        {"mlp_hidden", mlp_hidden},
                        {"lora_rank", lora_rank},
                        {"lora_alpha", lora_alpha},
                        {"lora_dropout", lora_dropout},
                        {"theta_tau_init", theta_tau_init},
                        {"theta_mod_init", theta_mod_init},
                        {"theta_lm_init", theta_lm_init},
                        {"denoise_noise_std", denoise_noise_std},
                        {"fuse_w_vec", fuse_w_vec},
                        {"fuse_w_chunk", fuse_w_chunk},
                        {"fuse_w_traj", fuse_w_traj},
                        {"joint_limit", joint_limit},
                        {"model_seed", model_seed}};
}

SigmaConfig SigmaConfig::from_json(const nlohmann::json& j) {
  SigmaConfig c;
  auto pick = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  pick("d_model", c.d_model);
  pick("d_t", c.d_t);
  pick("d_feat", c.d_feat);
  pick("n_f", c.n_f);
  pick("n_v", c.n_v);
  pick("n_s", c.n_s);
  pick("n_t", c.n_t);
  pick("k_sem", c.k_sem);
  pick("d_s", c.d_s);
  pick("d_a", c.d_a);
  pick("horizon_t", c.horizon_t);
  pick("chunk_c", c.chunk_c);
  pick("lm_blocks", c.lm_blocks);
  pick("vis_blocks", c.vis_blocks);
  pick("heads", c.heads);
  pick("n_q", c.n_q);
  pick("denoise_steps", c.denoise_steps);
  pick("denoise_hidden", c.denoise_hidden);
  pick("ffn_hidden", c.ffn_hidden);
  pick("mlp_hidden", c.mlp_hidden);
  pick("lora_rank", c.lora_rank);
  pick("lora_alpha", c.lora_alpha);
  pick("lora_dropout", c.lora_dropout);
  pick("theta_tau_init", c.theta_tau_init);
  pick("theta_mod_init", c.theta_mod_init);
  pick("theta_lm_init", c.theta_lm_init);
  pick("denoise_noise_std", c.denoise_noise_std);
  pick("fuse_w_vec", c.fuse_w_vec);
  pick("fuse_w_chunk", c.fuse_w_chunk);
  pick("fuse_w_traj", c.fuse_w_traj);
  pick("joint_limit", c.joint_limit);
  pick("model_seed", c.model_seed);
  return c;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], i).second) {
      throw ConfigError("duplicate vocabulary word: " + words_[i]);
    }
  }
}

Vocabulary Vocabulary::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

std::size_t Vocabulary::index_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw VocabError("word not in vocabulary: '" + word + "'");
  return it->second;
}

SigmaModel::SigmaModel(SigmaConfig cfg, Vocabulary vocab)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
  cfg_.validate();
  if (vocab_.size() == 0) throw ConfigError("empty vocabulary");
  register_params();
}

namespace {

// Registers one pre-norm transformer block's parameters.
void add_block(ParamStore& ps, Rng& rng, const SigmaConfig& cfg, const std::string& prefix,
               bool frozen_base, bool with_lora) {
  std::size_t d = cfg.d_model;
  double ws = 1.0 / std::sqrt(static_cast<double>(d));
  bool train = !frozen_base;
  ps.add(prefix + ".ln1_g", Tensor::full({d}, 1.0), train);
  ps.add(prefix + ".ln1_b", Tensor::zeros({d}), train);
  for (const char* p : {"q", "k", "v", "o"}) {
    ps.add(prefix + ".attn." + std::string(p) + ".w", normal_tensor(rng, {d, d}, ws), train);
    if (with_lora) {
      ps.add(prefix + ".attn." + std::string(p) + ".lora_a",
             normal_tensor(rng, {d, cfg.lora_rank}, ws), true);
      ps.add(prefix + ".attn." + std::string(p) + ".lora_b",
             Tensor::zeros({cfg.lora_rank, d}), true);
    }
  }
  ps.add(prefix + ".ln2_g", Tensor::full({d}, 1.0), train);
  ps.add(prefix + ".ln2_b", Tensor::zeros({d}), train);
  double fs = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_hidden));
  ps.add(prefix + ".ffn.w1", normal_tensor(rng, {d, cfg.ffn_hidden}, ws), train);
  ps.add(prefix + ".ffn.b1", Tensor::zeros({cfg.ffn_hidden}), train);
  ps.add(prefix + ".ffn.w2", normal_tensor(rng, {cfg.ffn_hidden, d}, fs), train);
  ps.add(prefix + ".ffn.b2", Tensor::zeros({d}), train);
}

}  // namespace

void SigmaModel::register_params() {
  Rng rng(derive_seed(cfg_.model_seed, "params"));
  std::size_t d = cfg_.d_model;
  double ws = 1.0 / std::sqrt(static_cast<double>(d));
  double ms = 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_hidden));

  // --- frozen backbone stand-in ---------------------------------------
  params_.add("text.proj",
              normal_tensor(rng, {vocab_.size(), d}, 1.0 / std::sqrt(double(vocab_.size()))),
              false);

  params_.add("state.mlp.w1",
              normal_tensor(rng, {cfg_.d_s, cfg_.mlp_hidden}, 1.0 / std::sqrt(double(cfg_.d_s))),
              false);
  params_.add("state.mlp.b1", Tensor::zeros({cfg_.mlp_hidden}), false);
  params_.add("state.mlp.w2", normal_tensor(rng, {cfg_.mlp_hidden, d}, ms), false);
  params_.add("state.mlp.b2", Tensor::zeros({d}), false);
  for (std::size_t i = 0; i < cfg_.n_s; ++i) {
    params_.add("state.expand.w" + std::to_string(i), normal_tensor(rng, {d, d}, ws), false);
    params_.add("state.expand.b" + std::to_string(i), Tensor::zeros({d}), false);
  }

  params_.add("vision.proj.w1",
              normal_tensor(rng, {cfg_.d_feat, cfg_.mlp_hidden},
                            1.0 / std::sqrt(double(cfg_.d_feat))),
              false);
  params_.add("vision.proj.b1", Tensor::zeros({cfg_.mlp_hidden}), false);
  params_.add("vision.proj.w2", normal_tensor(rng, {cfg_.mlp_hidden, d}, ms), false);
  params_.add("vision.proj.b2", Tensor::zeros({d}), false);

  params_.add("vision.resample.queries", normal_tensor(rng, {cfg_.n_v, d}, ws), false);
  params_.add("vision.resample.wq", normal_tensor(rng, {d, d}, ws), false);
  params_.add("vision.resample.wk", normal_tensor(rng, {d, d}, ws), false);
  params_.add("vision.resample.wv", normal_tensor(rng, {d, d}, ws), false);
  params_.add("vision.resample.ln_g", Tensor::full({d}, 1.0), false);
  params_.add("vision.resample.ln_b", Tensor::zeros({d}), false);
  params_.add("vision.resample.ffn.w1", normal_tensor(rng, {d, cfg_.ffn_hidden}, ws), false);
  params_.add("vision.resample.ffn.b1", Tensor::zeros({cfg_.ffn_hidden}), false);
  params_.add("vision.resample.ffn.w2",
              normal_tensor(rng, {cfg_.ffn_hidden, d}, 1.0 / std::sqrt(double(cfg_.ffn_hidden))),
              false);
  params_.add("vision.resample.ffn.b2", Tensor::zeros({d}), false);

  for (std::size_t i = 0; i < cfg_.vis_blocks; ++i) {
    add_block(params_, rng, cfg_, "vision.refine.block" + std::to_string(i), true, false);
  }

  for (const char* seg : {"text", "vision", "state"}) {
    params_.add("lm.segment." + std::string(seg), normal_tensor(rng, {1, d}, 0.02), false);
  }
  for (std::size_t i = 0; i < cfg_.lm_blocks; ++i) {
    add_block(params_, rng, cfg_, "lm.block" + std::to_string(i), true, true);
  }
  params_.add("lm.pool.w", normal_tensor(rng, {d, d}, ws), false);
  params_.add("lm.pool.b", Tensor::zeros({d}), false);

  params_.add("act.cond.w1",
              normal_tensor(rng, {d + cfg_.d_t, cfg_.mlp_hidden},
                            1.0 / std::sqrt(double(d + cfg_.d_t))),
              false);
  params_.add("act.cond.b1", Tensor::zeros({cfg_.mlp_hidden}), false);
  params_.add("act.cond.w2", normal_tensor(rng, {cfg_.mlp_hidden, d}, ms), false);
  params_.add("act.cond.b2", Tensor::zeros({d}), false);

  params_.add("act.query.seeds", normal_tensor(rng, {cfg_.n_q, d}, ws), false);
  params_.add("act.query.ws", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.attn.wq", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.attn.wk", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.attn.wv", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.attn.wo", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.bias_w", normal_tensor(rng, {d, d}, ws), false);
  params_.add("act.query.bias_b", Tensor::zeros({d}), false);
  add_block(params_, rng, cfg_, "act.query.block", true, false);
  params_.add("act.query.ln_g", Tensor::full({d}, 1.0), false);
  params_.add("act.query.ln_b", Tensor::zeros({d}), false);

  // Small output scales keep untrained baseline actions near the data scale.
  params_.add("act.head_vec.w", normal_tensor(rng, {d, cfg_.d_a}, 0.05 * ws), false);
  params_.add("act.head_vec.b", Tensor::zeros({cfg_.d_a}), false);
  params_.add("act.head_chunk.w", normal_tensor(rng, {d, cfg_.chunk_c * cfg_.d_a}, 0.05 * ws),
              false);
  params_.add("act.head_chunk.b", Tensor::zeros({cfg_.chunk_c * cfg_.d_a}), false);

  std::size_t traj_dim = cfg_.horizon_t * cfg_.d_a;
  std::size_t den_in = traj_dim + 1 + 3 * d;
  params_.add("act.denoise.w1",
              normal_tensor(rng, {den_in, cfg_.denoise_hidden}, 1.0 / std::sqrt(double(den_in))),
              false);
  params_.add("act.denoise.b1", Tensor::zeros({cfg_.denoise_hidden}), false);
  params_.add("act.denoise.w2",
              normal_tensor(rng, {cfg_.denoise_hidden, traj_dim},
                            0.05 / std::sqrt(double(cfg_.denoise_hidden))),
              false);
  params_.add("act.denoise.b2", Tensor::zeros({traj_dim}), false);

  // --- telepathy heads and gates (the trainable set) -------------------
  params_.add("heads.film.w1",
              normal_tensor(rng, {cfg_.d_t, cfg_.mlp_hidden}, 1.0 / std::sqrt(double(cfg_.d_t))),
              true);
  params_.add("heads.film.b1", Tensor::zeros({cfg_.mlp_hidden}), true);
  params_.add("heads.film.w2", normal_tensor(rng, {cfg_.mlp_hidden, 2 * d}, 0.1 * ms), true);
  Tensor film_b2 = Tensor::zeros({2 * d});
  for (std::size_t j = 0; j < d; ++j) film_b2[j] = 1.0;  // gamma starts at identity
  params_.add("heads.film.b2", std::move(film_b2), true);
  params_.add("heads.gate.theta_tau", Tensor::scalar(cfg_.theta_tau_init), true);
  params_.add("heads.gate.theta_mod", Tensor::scalar(cfg_.theta_mod_init), true);

  params_.add("heads.sem.queries", normal_tensor(rng, {cfg_.k_sem, d}, ws), true);
  params_.add("heads.sem.wk", normal_tensor(rng, {d, d}, ws), true);
  params_.add("heads.sem.wv", normal_tensor(rng, {d, d}, ws), true);

  params_.add("heads.mem.wu", normal_tensor(rng, {d, d}, ws), true);
  params_.add("heads.mem.bu", Tensor::zeros({d}), true);
  params_.add("heads.mem.wl", normal_tensor(rng, {2 * d, d}, 1.0 / std::sqrt(double(2 * d))),
              true);
  params_.add("heads.mem.bl", Tensor::zeros({d}), true);

  for (const char* h : {"sum_env", "sum_beh", "sum_text"}) {
    std::string p = "heads." + std::string(h);
    params_.add(p + ".q", normal_tensor(rng, {1, d}, ws), true);
    params_.add(p + ".w", normal_tensor(rng, {d, d}, ws), true);
    params_.add(p + ".b", Tensor::zeros({d}), true);
  }

  params_.add("heads.intent.w1",
              normal_tensor(rng, {3 * d, cfg_.mlp_hidden}, 1.0 / std::sqrt(double(3 * d))), true);
  params_.add("heads.intent.b1", Tensor::zeros({cfg_.mlp_hidden}), true);
  params_.add("heads.intent.w2", normal_tensor(rng, {cfg_.mlp_hidden, d}, ms), true);
  params_.add("heads.intent.b2", Tensor::zeros({d}), true);

  // Small output scale: the telepathy factor opens up during training
  // instead of starting loud.
  params_.add("heads.tau.w1",
              normal_tensor(rng, {6 * d, cfg_.mlp_hidden}, 1.0 / std::sqrt(double(6 * d))), true);
  params_.add("heads.tau.b1", Tensor::zeros({cfg_.mlp_hidden}), true);
  params_.add("heads.tau.w2", normal_tensor(rng, {cfg_.mlp_hidden, cfg_.d_t}, 0.02 * ms), true);
  params_.add("heads.tau.b2", Tensor::zeros({cfg_.d_t}), true);

  params_.add("heads.lmod.w_tau",
              normal_tensor(rng, {cfg_.d_t, d}, 1.0 / std::sqrt(double(cfg_.d_t))), true);
  params_.add("heads.lmod.g_ch", Tensor::zeros({d}), true);
  params_.add("heads.lmod.theta_lm", Tensor::scalar(cfg_.theta_lm_init), true);

  std::size_t res_out = cfg_.d_a + cfg_.chunk_c * cfg_.d_a + cfg_.horizon_t * cfg_.d_a;
  params_.add("heads.residual.w1",
              normal_tensor(rng, {d + cfg_.d_t, cfg_.mlp_hidden},
                            1.0 / std::sqrt(double(d + cfg_.d_t))),
              true);
  params_.add("heads.residual.b1", Tensor::zeros({cfg_.mlp_hidden}), true);
  // Zero output layer: residuals are exactly zero until trained.
  params_.add("heads.residual.w2", Tensor::zeros({cfg_.mlp_hidden, res_out}), true);
  params_.add("heads.residual.b2", Tensor::zeros({res_out}), true);

  params_.add("heads.tau_bridge.w", normal_tensor(rng, {d, cfg_.d_t}, ws), true);
}

std::vector<std::string> SigmaModel::telepathy_head_names() const {
  std::vector<std::string> out;
  for (const auto& name : params_.trainable_names()) {
    if (name.rfind("heads.", 0) == 0) out.push_back(name);
  }
  return out;
}

std::vector<std::string> SigmaModel::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& name : params_.names()) {
    if (!params_.is_trainable(name)) out.push_back(name);
  }
  return out;
}

void SigmaModel::save_trainable(const std::filesystem::path& path) const {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& name : params_.trainable_names()) tensors.emplace_back(name, params_.get(name));
  save_named_tensors(path, tensors);
}

void SigmaModel::load_trainable(const std::filesystem::path& path) {
  auto tensors = load_named_tensors(path);
  for (auto& [name, tensor] : tensors) {
    if (!params_.has(name)) {
      throw IntegrityError("weights file has unknown tensor '" + name + "'");
    }
    Tensor& dst = params_.get(name);
    if (dst.shape() != tensor.shape()) {
      throw IntegrityError("tensor '" + name + "' has shape " + tensor.shape_str() +
                           ", model expects " + dst.shape_str());
    }
    dst = std::move(tensor);
  }
}

Var transformer_block(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var x,
                      const std::string& prefix, const BlockOptions& opt) {
  auto P = [&](const std::string& s) { return g.param(ps, prefix + s); };
  Var xn = g.layer_norm(x, P(".ln1_g"), P(".ln1_b"));

  Var q, k, v;
  if (opt.use_lora) {
    train::LoraOptions lo;
    lo.alpha = cfg.lora_alpha;
    lo.rank = cfg.lora_rank;
    lo.dropout = opt.lora_dropout;
    lo.rng = opt.dropout_rng;
    q = train::lora_apply(g, xn, P(".attn.q.w"), P(".attn.q.lora_a"), P(".attn.q.lora_b"), lo);
    k = train::lora_apply(g, xn, P(".attn.k.w"), P(".attn.k.lora_a"), P(".attn.k.lora_b"), lo);
    v = train::lora_apply(g, xn, P(".attn.v.w"), P(".attn.v.lora_a"), P(".attn.v.lora_b"), lo);
  } else {
    q = g.matmul(xn, P(".attn.q.w"));
    k = g.matmul(xn, P(".attn.k.w"));
    v = g.matmul(xn, P(".attn.v.w"));
  }

  std::size_t dh = cfg.d_model / cfg.heads;
  std::vector<Var> head_outs;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Var attn = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
    head_outs.push_back(g.matmul(attn, vh));
  }
  Var concat = g.concat_cols(head_outs);
  Var attn_out;
  if (opt.use_lora) {
    train::LoraOptions lo;
    lo.alpha = cfg.lora_alpha;
    lo.rank = cfg.lora_rank;
    lo.dropout = opt.lora_dropout;
    lo.rng = opt.dropout_rng;
    attn_out =
        train::lora_apply(g, concat, P(".attn.o.w"), P(".attn.o.lora_a"), P(".attn.o.lora_b"), lo);
  } else {
    attn_out = g.matmul(concat, P(".attn.o.w"));
  }
  Var x1 = g.add(x, attn_out);

  Var x1n = g.layer_norm(x1, P(".ln2_g"), P(".ln2_b"));
  Var ffn = g.affine(g.gelu(g.affine(x1n, P(".ffn.w1"), P(".ffn.b1"))), P(".ffn.w2"), P(".ffn.b2"));
  return g.add(x1, ffn);
}

}  // namespace sigma
