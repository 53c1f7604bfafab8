#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sigma/tensor.hpp"

namespace sigma::shards {

struct Frame {
  std::size_t frame_index = 0;
  Tensor vision_features;  // [N_f x d_feat]
  Tensor robot_state;      // [D_s]
  Tensor action;           // [D_a]
};

struct Episode {
  std::size_t episode_index = 0;
  std::string text;
  std::vector<Frame> frames;

  // Restores temporal order; frame indices must be unique.
  void sort_frames();
};

struct WindowSample {
  std::size_t episode_index = 0;
  std::size_t window_start = 0;
  Tensor vision_inputs;         // [T x N_f x d_feat]
  Tensor robot_state;           // [T x D_s]
  Tensor gt_action_vector;      // [D_a]
  Tensor gt_action_chunk;       // [C x D_a]
  Tensor gt_action_trajectory;  // [T x D_a]
  std::string text;
  double avg_action_l2 = 0.0;
  double max_action_l2 = 0.0;
  std::optional<Tensor> base_action_vector;
  std::optional<Tensor> base_action_chunk;
  std::optional<Tensor> base_action_trajectory;
};

bool samples_bit_equal(const WindowSample& a, const WindowSample& b);

struct ShardFileEntry {
  std::string file;
  std::size_t samples = 0;
};

struct ShardManifest {
  std::string dataset_id;
  std::size_t episode_count = 0;
  std::size_t window_count = 0;
  std::size_t retained_count = 0;
  std::size_t filtered_count = 0;
  std::size_t horizon_t = 16;
  std::size_t stride = 1;
  std::size_t chunk_c = 8;
  double min_action_norm = 0.01;
  std::size_t shard_size = 256;
  std::uint64_t seed = 0;
  std::vector<ShardFileEntry> shards;
};

// ---------------------------------------------------------------------------
// Synthetic pick-place source (local stand-in for the remote dataset).

struct SyntheticConfig {
  std::size_t d_a = 6;
  std::size_t d_s = 6;
  std::size_t n_f = 12;
  std::size_t d_feat = 16;
  double noise_std = 0.01;
  bool hold_still = false;  // zero-motion "hold still" episode
};

// Scripted reach->grasp->move->release trajectory. Deterministic per seed;
// action[t] integrates state: state[t+1] = state[t] + action[t].
Episode generate_synthetic_episode(std::uint64_t seed, std::size_t length,
                                   const SyntheticConfig& cfg, std::size_t horizon_t = 1);

// Template vocabulary of the generator, pad symbol first.
std::vector<std::string> synthetic_vocabulary();

// ---------------------------------------------------------------------------
// Windowing.

std::vector<WindowSample> build_windows(const Episode& episode, std::size_t horizon_t,
                                        std::size_t stride, std::size_t chunk_c);

// (avg, max) of the per-step Euclidean norms.
std::pair<double, double> compute_action_stats(const Tensor& actions);

std::pair<std::vector<WindowSample>, std::size_t> filter_static(std::vector<WindowSample> windows,
                                                                double min_action_norm);

// ---------------------------------------------------------------------------
// Shard files.

struct ShardWriteInfo {
  std::filesystem::path out_dir;
  std::size_t shard_size = 256;
  std::string dataset_id = "synthetic-pickplace-v1";
  std::size_t episode_count = 0;
  std::size_t window_count = 0;
  std::size_t filtered_count = 0;
  std::size_t horizon_t = 16;
  std::size_t stride = 1;
  std::size_t chunk_c = 8;
  double min_action_norm = 0.01;
  std::uint64_t seed = 0;
};

// Writes shard_00000.bin, shard_00001.bin, ... then meta.json last. Existing
// complete shards are validated and skipped, so an interrupted run resumes
// where it stopped and the final directory is identical either way.
ShardManifest write_shards(const std::vector<WindowSample>& samples, const ShardWriteInfo& info);

std::vector<WindowSample> load_shard_file(const std::filesystem::path& path);

ShardManifest load_manifest(const std::filesystem::path& dir);

struct RetryPolicy {
  std::size_t max_attempts = 3;
  double base_delay_ms = 10.0;  // doubles on every retry
};

using ShardLoader = std::function<std::vector<WindowSample>(const std::filesystem::path&)>;

// Streams samples in shard order. Transient read failures (IoError) are
// retried with exponential backoff; integrity problems are permanent.
class ShardStream {
 public:
  explicit ShardStream(std::filesystem::path dir, RetryPolicy policy = {},
                       ShardLoader loader = {});

  std::optional<WindowSample> next();
  const ShardManifest& manifest() const { return manifest_; }

 private:
  void load_next_shard();

  std::filesystem::path dir_;
  RetryPolicy policy_;
  ShardLoader loader_;
  ShardManifest manifest_;
  std::size_t shard_cursor_ = 0;
  std::vector<WindowSample> current_;
  std::size_t sample_cursor_ = 0;
};

std::vector<WindowSample> read_all_shards(const std::filesystem::path& dir, RetryPolicy policy = {},
                                          ShardLoader loader = {});

// ---------------------------------------------------------------------------
// Whole preprocessing pipeline (generate -> window -> filter -> write).

struct PreprocessConfig {
  std::size_t episodes = 8;
  std::size_t episode_length = 48;
  std::size_t horizon_t = 16;
  std::size_t stride = 1;
  std::size_t chunk_c = 8;
  double min_action_norm = 0.01;
  std::size_t shard_size = 256;
  std::uint64_t seed = 7;
  // Every n-th episode is a zero-motion "hold still" episode; 0 disables.
  std::size_t hold_still_every = 8;
  SyntheticConfig synth;
  std::filesystem::path out_dir;
};

ShardManifest run_preprocess(const PreprocessConfig& cfg);

}  // namespace sigma::shards
