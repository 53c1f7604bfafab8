#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sigma/graph.hpp"
#include "sigma/params.hpp"

namespace sigma {

// Architecture dimensions and defaults. The horizon is the paper's value;
// the rest are desk-scale choices recorded with every artifact.
struct SigmaConfig {
  std::size_t d_model = 32;
  std::size_t d_t = 8;
  std::size_t d_feat = 16;
  std::size_t n_f = 12;
  std::size_t n_v = 6;
  std::size_t n_s = 2;
  std::size_t n_t = 12;
  std::size_t k_sem = 4;
  std::size_t d_s = 6;
  std::size_t d_a = 6;
  std::size_t horizon_t = 16;
  std::size_t chunk_c = 8;
  std::size_t lm_blocks = 2;
  std::size_t vis_blocks = 1;
  std::size_t heads = 4;
  std::size_t n_q = 8;
  std::size_t denoise_steps = 8;
  std::size_t denoise_hidden = 48;
  std::size_t ffn_hidden = 64;
  std::size_t mlp_hidden = 32;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  double lora_dropout = 0.05;
  double theta_tau_init = 0.0;
  double theta_mod_init = -2.0;
  double theta_lm_init = -2.0;
  double denoise_noise_std = 0.1;
  double fuse_w_vec = 0.5;
  double fuse_w_chunk = 0.25;
  double fuse_w_traj = 0.25;
  double joint_limit = 3.14159265358979323846;
  std::uint64_t model_seed = 1234;

  void validate() const;
  nlohmann::json to_json() const;
  static SigmaConfig from_json(const nlohmann::json& j);
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);
  static Vocabulary from_file(const std::filesystem::path& path);

  std::size_t index_of(const std::string& word) const;  // VocabError when missing
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  std::size_t pad_index() const { return 0; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

// Full parameter set: a frozen randomly initialized backbone standing in for
// the pretrained base, plus the trainable telepathy heads, gates, and LoRA
// factors. Construction is deterministic per (config, model_seed).
class SigmaModel {
 public:
  SigmaModel(SigmaConfig cfg, Vocabulary vocab);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const SigmaConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  // Trainable-parameter names, i.e. the contents of the weights file.
  std::vector<std::string> trainable_names() const { return params_.trainable_names(); }
  // Telepathy-head subset (excludes LoRA factors).
  std::vector<std::string> telepathy_head_names() const;
  // Frozen backbone subset.
  std::vector<std::string> frozen_names() const;

  void save_trainable(const std::filesystem::path& path) const;
  void load_trainable(const std::filesystem::path& path);

 private:
  void register_params();

  SigmaConfig cfg_;
  Vocabulary vocab_;
  ParamStore params_;
};

// Shared pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
// When lora_rank > 0 the attention projections go through LoRA factors
// registered beside the base weights.
struct BlockOptions {
  bool use_lora = false;
  double lora_dropout = 0.0;
  Rng* dropout_rng = nullptr;
};
Var transformer_block(Graph& g, ParamStore& ps, const SigmaConfig& cfg, Var x,
                      const std::string& prefix, const BlockOptions& opt = {});

}  // namespace sigma
