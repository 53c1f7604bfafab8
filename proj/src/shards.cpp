#include "sigma/shards.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "sigma/errors.hpp"
#include "sigma/io.hpp"
#include "sigma/random.hpp"

namespace sigma::shards {

namespace {

using nlohmann::json;

std::string shard_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "shard_%05zu.bin", index);
  return buf;
}

struct FieldRef {
  const char* name;
  const Tensor* tensor;
};

// Declared payload order; stats ride along as [1] tensors.
std::vector<FieldRef> sample_fields(const WindowSample& s, const Tensor& avg, const Tensor& mx) {
  std::vector<FieldRef> fields = {
      {"vision_inputs", &s.vision_inputs},
      {"robot_state", &s.robot_state},
      {"gt_action_vector", &s.gt_action_vector},
      {"gt_action_chunk", &s.gt_action_chunk},
      {"gt_action_trajectory", &s.gt_action_trajectory},
      {"avg_action_l2", &avg},
      {"max_action_l2", &mx},
  };
  if (s.base_action_vector) fields.push_back({"base_action_vector", &*s.base_action_vector});
  if (s.base_action_chunk) fields.push_back({"base_action_chunk", &*s.base_action_chunk});
  if (s.base_action_trajectory) {
    fields.push_back({"base_action_trajectory", &*s.base_action_trajectory});
  }
  return fields;
}

void write_one_shard(const std::filesystem::path& path, const WindowSample* samples,
                     std::size_t count) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");

  Tensor avg0 = Tensor::scalar(samples[0].avg_action_l2).reshaped({1});
  Tensor max0 = Tensor::scalar(samples[0].max_action_l2).reshaped({1});
  auto fields0 = sample_fields(samples[0], avg0, max0);

  json header;
  header["magic"] = "sigma-shard-v1";
  header["sample_count"] = count;
  json fields = json::array();
  for (const auto& f : fields0) fields.push_back({{"name", f.name}, {"shape", f.tensor->shape()}});
  header["fields"] = fields;
  json texts = json::array(), episodes = json::array(), starts = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    texts.push_back(samples[i].text);
    episodes.push_back(samples[i].episode_index);
    starts.push_back(samples[i].window_start);
  }
  header["texts"] = texts;
  header["episode_index"] = episodes;
  header["window_start"] = starts;
  write_json_line(os, header);

  for (std::size_t i = 0; i < count; ++i) {
    Tensor avg = Tensor::scalar(samples[i].avg_action_l2).reshaped({1});
    Tensor mx = Tensor::scalar(samples[i].max_action_l2).reshaped({1});
    auto fields_i = sample_fields(samples[i], avg, mx);
    if (fields_i.size() != fields0.size()) {
      throw ConfigError("samples in one shard must share the same field set");
    }
    for (std::size_t f = 0; f < fields_i.size(); ++f) {
      if (fields_i[f].tensor->shape() != fields0[f].tensor->shape()) {
        throw ConfigError(std::string("field ") + fields_i[f].name +
                          " changes shape within a shard");
      }
      write_f64_le(os, fields_i[f].tensor->data().data(), fields_i[f].tensor->size());
    }
  }
  if (!os) throw IoError("failed to write " + path.string());
}

// Validates an existing shard and returns its sample count.
std::size_t validate_shard(const std::filesystem::path& path) {
  try {
    return load_shard_file(path).size();
  } catch (const IntegrityError&) {
    throw;
  } catch (const Error& e) {
    throw IntegrityError("corrupt shard " + path.string() + ": " + e.what());
  }
}

json manifest_to_json(const ShardManifest& m) {
  json j;
  j["dataset_id"] = m.dataset_id;
  j["episode_count"] = m.episode_count;
  j["window_count"] = m.window_count;
  j["retained_count"] = m.retained_count;
  j["filtered_count"] = m.filtered_count;
  j["hyperparameters"] = {{"horizon_T", m.horizon_t},
                          {"stride", m.stride},
                          {"chunk_C", m.chunk_c},
                          {"min_action_norm", m.min_action_norm},
                          {"shard_size", m.shard_size},
                          {"seed", m.seed}};
  json shards = json::array();
  for (const auto& s : m.shards) shards.push_back({{"file", s.file}, {"samples", s.samples}});
  j["shards"] = shards;
  return j;
}

ShardManifest manifest_from_json(const json& j) {
  ShardManifest m;
  m.dataset_id = j.at("dataset_id").get<std::string>();
  m.episode_count = j.at("episode_count").get<std::size_t>();
  m.window_count = j.at("window_count").get<std::size_t>();
  m.retained_count = j.at("retained_count").get<std::size_t>();
  m.filtered_count = j.at("filtered_count").get<std::size_t>();
  const json& h = j.at("hyperparameters");
  m.horizon_t = h.at("horizon_T").get<std::size_t>();
  m.stride = h.at("stride").get<std::size_t>();
  m.chunk_c = h.at("chunk_C").get<std::size_t>();
  m.min_action_norm = h.at("min_action_norm").get<double>();
  m.shard_size = h.at("shard_size").get<std::size_t>();
  m.seed = h.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("shards")) {
    m.shards.push_back({s.at("file").get<std::string>(), s.at("samples").get<std::size_t>()});
  }
  return m;
}

}  // namespace

bool samples_bit_equal(const WindowSample& a, const WindowSample& b) {
  auto opt_equal = [](const std::optional<Tensor>& x, const std::optional<Tensor>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || bit_equal(*x, *y);
  };
  return a.episode_index == b.episode_index && a.window_start == b.window_start &&
         a.text == b.text && a.avg_action_l2 == b.avg_action_l2 &&
         a.max_action_l2 == b.max_action_l2 && bit_equal(a.vision_inputs, b.vision_inputs) &&
         bit_equal(a.robot_state, b.robot_state) &&
         bit_equal(a.gt_action_vector, b.gt_action_vector) &&
         bit_equal(a.gt_action_chunk, b.gt_action_chunk) &&
         bit_equal(a.gt_action_trajectory, b.gt_action_trajectory) &&
         opt_equal(a.base_action_vector, b.base_action_vector) &&
         opt_equal(a.base_action_chunk, b.base_action_chunk) &&
         opt_equal(a.base_action_trajectory, b.base_action_trajectory);
}

std::pair<double, double> compute_action_stats(const Tensor& actions) {
  std::size_t t = actions.rows(), d = actions.cols();
  if (t == 0) throw ContractError("compute_action_stats: empty action tensor");
  double sum = 0.0, mx = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) n2 += actions(i, j) * actions(i, j);
    double n = std::sqrt(n2);
    sum += n;
    mx = std::max(mx, n);
  }
  return {sum / static_cast<double>(t), mx};
}

std::vector<WindowSample> build_windows(const Episode& episode, std::size_t horizon_t,
                                        std::size_t stride, std::size_t chunk_c) {
  if (horizon_t < 1 || stride < 1) throw ConfigError("horizon and stride must be >= 1");
  if (chunk_c > horizon_t) throw ConfigError("chunk length exceeds horizon");

  Episode sorted = episode;
  sorted.sort_frames();
  std::size_t len = sorted.frames.size();
  std::vector<WindowSample> out;
  if (len < horizon_t) return out;

  std::size_t nf = sorted.frames[0].vision_features.rows();
  std::size_t dfeat = sorted.frames[0].vision_features.cols();
  std::size_t ds = sorted.frames[0].robot_state.size();
  std::size_t da = sorted.frames[0].action.size();

  for (std::size_t start = 0; start + horizon_t <= len; start += stride) {
    WindowSample w;
    w.episode_index = sorted.episode_index;
    w.window_start = start;
    w.text = sorted.text;
    w.vision_inputs = Tensor({horizon_t, nf, dfeat});
    w.robot_state = Tensor({horizon_t, ds});
    w.gt_action_trajectory = Tensor({horizon_t, da});
    for (std::size_t t = 0; t < horizon_t; ++t) {
      const Frame& fr = sorted.frames[start + t];
      std::copy(fr.vision_features.data().begin(), fr.vision_features.data().end(),
                w.vision_inputs.data().begin() + static_cast<long>(t * nf * dfeat));
      std::copy(fr.robot_state.data().begin(), fr.robot_state.data().end(),
                w.robot_state.data().begin() + static_cast<long>(t * ds));
      std::copy(fr.action.data().begin(), fr.action.data().end(),
                w.gt_action_trajectory.data().begin() + static_cast<long>(t * da));
    }
    w.gt_action_vector = Tensor({da});
    std::copy(w.gt_action_trajectory.data().begin(),
              w.gt_action_trajectory.data().begin() + static_cast<long>(da),
              w.gt_action_vector.data().begin());
    w.gt_action_chunk = Tensor({chunk_c, da});
    std::copy(w.gt_action_trajectory.data().begin(),
              w.gt_action_trajectory.data().begin() + static_cast<long>(chunk_c * da),
              w.gt_action_chunk.data().begin());
    auto [avg, mx] = compute_action_stats(w.gt_action_trajectory);
    w.avg_action_l2 = avg;
    w.max_action_l2 = mx;
    out.push_back(std::move(w));
  }
  return out;
}

std::pair<std::vector<WindowSample>, std::size_t> filter_static(std::vector<WindowSample> windows,
                                                                double min_action_norm) {
  std::vector<WindowSample> retained;
  retained.reserve(windows.size());
  std::size_t filtered = 0;
  for (auto& w : windows) {
    if (w.avg_action_l2 >= min_action_norm) {
      retained.push_back(std::move(w));
    } else {
      ++filtered;
    }
  }
  return {std::move(retained), filtered};
}

ShardManifest write_shards(const std::vector<WindowSample>& samples, const ShardWriteInfo& info) {
  std::error_code ec;
  std::filesystem::create_directories(info.out_dir, ec);
  if (ec) throw IoError("cannot create " + info.out_dir.string() + ": " + ec.message());

  // Resume: count samples already inside complete shards.
  std::size_t skip_count = 0;
  std::size_t next_shard = 0;
  std::vector<ShardFileEntry> entries;
  while (true) {
    std::filesystem::path p = info.out_dir / shard_name(next_shard);
    if (!std::filesystem::exists(p)) break;
    std::size_t n = validate_shard(p);
    entries.push_back({shard_name(next_shard), n});
    skip_count += n;
    ++next_shard;
  }
  if (skip_count > samples.size()) {
    throw IntegrityError("existing shards hold " + std::to_string(skip_count) +
                         " samples but only " + std::to_string(samples.size()) + " were provided");
  }

  for (std::size_t at = skip_count; at < samples.size(); at += info.shard_size, ++next_shard) {
    std::size_t n = std::min(info.shard_size, samples.size() - at);
    std::filesystem::path p = info.out_dir / shard_name(next_shard);
    write_one_shard(p, samples.data() + at, n);
    entries.push_back({shard_name(next_shard), n});
  }

  ShardManifest m;
  m.dataset_id = info.dataset_id;
  m.episode_count = info.episode_count;
  m.window_count = info.window_count;
  m.retained_count = samples.size();
  m.filtered_count = info.filtered_count;
  m.horizon_t = info.horizon_t;
  m.stride = info.stride;
  m.chunk_c = info.chunk_c;
  m.min_action_norm = info.min_action_norm;
  m.shard_size = info.shard_size;
  m.seed = info.seed;
  m.shards = std::move(entries);
  // Manifest last: its presence marks a complete directory.
  write_json_file(info.out_dir / "meta.json", manifest_to_json(m));
  return m;
}

std::vector<WindowSample> load_shard_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  json header = read_json_line(is, path.string());
  if (header.value("magic", "") != "sigma-shard-v1") {
    throw IntegrityError("bad magic in " + path.string());
  }
  std::size_t count = header.at("sample_count").get<std::size_t>();
  const json& fields = header.at("fields");
  const json& texts = header.at("texts");
  const json& episodes = header.at("episode_index");
  const json& starts = header.at("window_start");
  if (texts.size() != count || episodes.size() != count || starts.size() != count) {
    throw IntegrityError("header arrays disagree with sample_count in " + path.string());
  }

  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    WindowSample s;
    s.text = texts[i].get<std::string>();
    s.episode_index = episodes[i].get<std::size_t>();
    s.window_start = starts[i].get<std::size_t>();
    for (const auto& f : fields) {
      std::string name = f.at("name").get<std::string>();
      Tensor t(f.at("shape").get<std::vector<std::size_t>>());
      try {
        read_f64_le(is, t.data().data(), t.size());
      } catch (const IoError&) {
        throw IntegrityError("truncated payload in " + path.string());
      }
      if (name == "vision_inputs") {
        s.vision_inputs = std::move(t);
      } else if (name == "robot_state") {
        s.robot_state = std::move(t);
      } else if (name == "gt_action_vector") {
        s.gt_action_vector = std::move(t);
      } else if (name == "gt_action_chunk") {
        s.gt_action_chunk = std::move(t);
      } else if (name == "gt_action_trajectory") {
        s.gt_action_trajectory = std::move(t);
      } else if (name == "avg_action_l2") {
        s.avg_action_l2 = t[0];
      } else if (name == "max_action_l2") {
        s.max_action_l2 = t[0];
      } else if (name == "base_action_vector") {
        s.base_action_vector = std::move(t);
      } else if (name == "base_action_chunk") {
        s.base_action_chunk = std::move(t);
      } else if (name == "base_action_trajectory") {
        s.base_action_trajectory = std::move(t);
      } else {
        throw IntegrityError("unknown field '" + name + "' in " + path.string());
      }
    }
    out.push_back(std::move(s));
  }
  char probe = 0;
  is.read(&probe, 1);
  if (is.gcount() != 0) throw IntegrityError("trailing bytes in " + path.string());
  return out;
}

ShardManifest load_manifest(const std::filesystem::path& dir) {
  std::filesystem::path p = dir / "meta.json";
  if (!std::filesystem::exists(p)) throw IoError("no manifest at " + p.string());
  return manifest_from_json(read_json_file(p));
}

ShardStream::ShardStream(std::filesystem::path dir, RetryPolicy policy, ShardLoader loader)
    : dir_(std::move(dir)), policy_(policy), loader_(std::move(loader)) {
  if (!loader_) loader_ = [](const std::filesystem::path& p) { return load_shard_file(p); };
  if (policy_.max_attempts < 1) throw ConfigError("retry policy needs at least one attempt");
  manifest_ = load_manifest(dir_);
  std::size_t total = 0;
  for (const auto& e : manifest_.shards) total += e.samples;
  if (total != manifest_.retained_count) {
    throw IntegrityError("manifest sample counts disagree with retained_count");
  }
}

void ShardStream::load_next_shard() {
  const auto& entry = manifest_.shards[shard_cursor_];
  std::filesystem::path p = dir_ / entry.file;
  double delay_ms = policy_.base_delay_ms;
  for (std::size_t attempt = 1;; ++attempt) {
    try {
      current_ = loader_(p);
      break;
    } catch (const IntegrityError&) {
      throw;
    } catch (const Error& e) {
      if (attempt >= policy_.max_attempts) {
        throw IoError("permanent read failure on " + entry.file + " after " +
                      std::to_string(policy_.max_attempts) + " attempts: " + e.what());
      }
      if (delay_ms > 0) {
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay_ms));
      }
      delay_ms *= 2.0;
    }
  }
  if (current_.size() != entry.samples) {
    throw IntegrityError("shard " + entry.file + " holds " + std::to_string(current_.size()) +
                         " samples, manifest says " + std::to_string(entry.samples));
  }
  sample_cursor_ = 0;
  ++shard_cursor_;
}

std::optional<WindowSample> ShardStream::next() {
  while (sample_cursor_ >= current_.size()) {
    if (shard_cursor_ >= manifest_.shards.size()) return std::nullopt;
    load_next_shard();
  }
  return current_[sample_cursor_++];
}

std::vector<WindowSample> read_all_shards(const std::filesystem::path& dir, RetryPolicy policy,
                                          ShardLoader loader) {
  ShardStream stream(dir, policy, std::move(loader));
  std::vector<WindowSample> out;
  out.reserve(stream.manifest().retained_count);
  while (auto s = stream.next()) out.push_back(std::move(*s));
  return out;
}

ShardManifest run_preprocess(const PreprocessConfig& cfg) {
  std::vector<WindowSample> retained_all;
  std::size_t window_count = 0, filtered_count = 0;
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    SyntheticConfig synth = cfg.synth;
    synth.hold_still = cfg.hold_still_every > 0 && (e + 1) % cfg.hold_still_every == 0;
    Episode ep = generate_synthetic_episode(derive_seed(cfg.seed, e), cfg.episode_length, synth,
                                            cfg.horizon_t);
    ep.episode_index = e;
    auto windows = build_windows(ep, cfg.horizon_t, cfg.stride, cfg.chunk_c);
    window_count += windows.size();
    auto [retained, filtered] = filter_static(std::move(windows), cfg.min_action_norm);
    filtered_count += filtered;
    for (auto& w : retained) retained_all.push_back(std::move(w));
  }

  ShardWriteInfo info;
  info.out_dir = cfg.out_dir;
  info.shard_size = cfg.shard_size;
  info.episode_count = cfg.episodes;
  info.window_count = window_count;
  info.filtered_count = filtered_count;
  info.horizon_t = cfg.horizon_t;
  info.stride = cfg.stride;
  info.chunk_c = cfg.chunk_c;
  info.min_action_norm = cfg.min_action_norm;
  info.seed = cfg.seed;
  ShardManifest manifest = write_shards(retained_all, info);

  // Vocabulary file: one word per line, line number = one-hot index.
  std::string vocab;
  for (const auto& w : synthetic_vocabulary()) vocab += w + "\n";
  write_text_file(cfg.out_dir / "vocab.txt", vocab);
  return manifest;
}

}  // namespace sigma::shards
