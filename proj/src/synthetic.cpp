#include <algorithm>
#include <array>
#include <cmath>

#include "sigma/errors.hpp"
#include "sigma/random.hpp"
#include "sigma/shards.hpp"

namespace sigma::shards {

namespace {

// The vision featurizer is a fixed random projection shared by every episode
// and dataset, so train and held-out shards live in one feature space.
constexpr std::uint64_t kFeaturizerSeed = 0x5167a0f3a71ce5ULL;

constexpr std::array<const char*, 4> kColors = {"red", "green", "blue", "yellow"};
constexpr std::array<const char*, 4> kZones = {"left", "right", "center", "far"};

std::string fill_template(std::size_t which, const std::string& color, const std::string& zone) {
  switch (which) {
    case 0:
      return "pick the " + color + " block and place it on the " + zone + " tray";
    case 1:
      return "move the " + color + " block to the " + zone + " zone";
    default:
      return "grab the " + color + " cube then put it near the " + zone + " marker";
  }
}

double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

}  // namespace

std::vector<std::string> synthetic_vocabulary() {
  std::vector<std::string> vocab = {"<pad>"};
  const char* words[] = {"pick", "the",  "block", "and",  "place", "it",   "on",  "tray",
                         "move", "to",   "zone",  "grab", "cube",  "then", "put", "near",
                         "marker", "hold", "still"};
  for (const char* w : words) vocab.emplace_back(w);
  for (const char* c : kColors) vocab.emplace_back(c);
  for (const char* z : kZones) vocab.emplace_back(z);
  return vocab;
}

void Episode::sort_frames() {
  std::stable_sort(frames.begin(), frames.end(),
                   [](const Frame& a, const Frame& b) { return a.frame_index < b.frame_index; });
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].frame_index <= frames[i - 1].frame_index) {
      throw IntegrityError("duplicate frame_index " + std::to_string(frames[i].frame_index) +
                           " in episode " + std::to_string(episode_index));
    }
  }
}

Episode generate_synthetic_episode(std::uint64_t seed, std::size_t length,
                                   const SyntheticConfig& cfg, std::size_t horizon_t) {
  if (length < horizon_t) {
    throw ConfigError("episode length " + std::to_string(length) + " shorter than horizon " +
                      std::to_string(horizon_t));
  }
  Rng rng(seed);
  Episode ep;  // episode_index assigned by the caller

  // Joint-space waypoints: home, above object, grasp, above target, release.
  // The last state dimension is the gripper.
  std::size_t ds = cfg.d_s;
  std::vector<std::vector<double>> way(5, std::vector<double>(ds, 0.0));
  for (std::size_t j = 0; j + 1 < ds; ++j) way[0][j] = rng.uniform(-0.3, 0.3);
  for (std::size_t j = 0; j + 1 < ds; ++j) way[1][j] = rng.uniform(-1.0, 1.0);
  way[2] = way[1];
  for (std::size_t j = 0; j + 1 < ds; ++j) way[3][j] = rng.uniform(-1.0, 1.0);
  way[4] = way[3];
  way[0][ds - 1] = 0.9;
  way[1][ds - 1] = 0.9;
  way[2][ds - 1] = 0.1;  // closed
  way[3][ds - 1] = 0.1;
  way[4][ds - 1] = 0.9;  // released

  double object_pos[3] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 0.5)};

  std::size_t color = rng.below(kColors.size());
  std::size_t zone = rng.below(kZones.size());
  std::size_t tmpl = rng.below(3);
  ep.text = cfg.hold_still ? "hold still" : fill_template(tmpl, kColors[color], kZones[zone]);

  // Phase boundaries as fractions of the episode.
  const double bounds[5] = {0.0, 0.3, 0.45, 0.8, 1.0};

  auto state_at = [&](std::size_t t) {
    std::vector<double> s = way[0];
    if (cfg.hold_still || length <= 1) return s;
    double u = static_cast<double>(t) / static_cast<double>(length - 1);
    std::size_t seg = 3;
    while (seg > 0 && u < bounds[seg]) --seg;
    double span = bounds[seg + 1] - bounds[seg];
    double local = smoothstep((u - bounds[seg]) / span);
    for (std::size_t j = 0; j < ds; ++j) {
      s[j] = way[seg][j] + local * (way[seg + 1][j] - way[seg][j]);
    }
    return s;
  };

  auto phase_at = [&](std::size_t t) -> std::size_t {
    if (cfg.hold_still || length <= 1) return 0;
    double u = static_cast<double>(t) / static_cast<double>(length - 1);
    std::size_t seg = 3;
    while (seg > 0 && u < bounds[seg]) --seg;
    return seg;
  };

  // Featurizer projection, identical for every episode.
  std::size_t scene_dim = ds + 3 + 4;
  std::size_t feat_total = cfg.n_f * cfg.d_feat;
  Rng feat_rng(kFeaturizerSeed);
  Tensor projection = normal_tensor(feat_rng, {scene_dim, feat_total},
                                    1.0 / std::sqrt(static_cast<double>(scene_dim)));

  ep.frames.reserve(length);
  for (std::size_t t = 0; t < length; ++t) {
    Frame fr;
    fr.frame_index = t;
    std::vector<double> s = state_at(t);
    std::vector<double> s_next = t + 1 < length ? state_at(t + 1) : s;

    fr.robot_state = Tensor({ds});
    fr.action = Tensor({cfg.d_a});
    for (std::size_t j = 0; j < ds; ++j) fr.robot_state[j] = s[j];
    for (std::size_t j = 0; j < cfg.d_a && j < ds; ++j) fr.action[j] = s_next[j] - s[j];

    std::vector<double> scene(scene_dim, 0.0);
    for (std::size_t j = 0; j < ds; ++j) scene[j] = s[j];
    for (std::size_t j = 0; j < 3; ++j) scene[ds + j] = object_pos[j];
    scene[ds + 3 + phase_at(t)] = 1.0;

    fr.vision_features = Tensor({cfg.n_f, cfg.d_feat});
    for (std::size_t f = 0; f < feat_total; ++f) {
      double v = 0.0;
      for (std::size_t j = 0; j < scene_dim; ++j) v += scene[j] * projection[j * feat_total + f];
      fr.vision_features.data()[f] = v + rng.normal(0.0, cfg.noise_std);
    }
    ep.frames.push_back(std::move(fr));
  }
  return ep;
}

}  // namespace sigma::shards
