#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/errors.hpp"
#include "rarl/grpo.hpp"
#include "rarl/ordinal.hpp"
#include "rarl/policy.hpp"
#include "rarl/reward.hpp"
#include "rarl/rng.hpp"

namespace rarl {

enum class TaskFamily { age_like, count_like, score_like };

inline const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::age_like: return "age_like";
    case TaskFamily::count_like: return "count_like";
    case TaskFamily::score_like: return "score_like";
  }
  return "unknown";
}

inline TaskFamily family_from_string(const std::string& s) {
  if (s == "age_like") return TaskFamily::age_like;
  if (s == "count_like") return TaskFamily::count_like;
  if (s == "score_like") return TaskFamily::score_like;
  throw ConfigInvalid("unknown task family: " + s);
}

inline RankScale family_scale(TaskFamily f) {
  switch (f) {
    case TaskFamily::age_like: return RankScale{101, 0.0, 100.0};
    case TaskFamily::count_like: return RankScale{51, 0.0, 50.0};
    case TaskFamily::score_like: return RankScale{10, 1.0, 10.0};
  }
  return RankScale{};
}

inline double family_delta(TaskFamily f) {
  switch (f) {
    case TaskFamily::age_like: return RewardConfig::default_delta_age();
    case TaskFamily::count_like: return RewardConfig::default_delta_count();
    case TaskFamily::score_like: return RewardConfig::default_delta_score();
  }
  return 1.0;
}

struct TaskSpec {
  TaskFamily family = TaskFamily::age_like;
  RankScale scale = family_scale(TaskFamily::age_like);
  std::size_t feature_dim = 8;
  double noise_sigma = 0.01;
  std::size_t batch_n = 4;
  std::size_t num_batches = 256;
  std::uint64_t seed = 1;
  // The embedding is a property of the task, not of one draw: evaluation
  // sets reuse the training embedding by sharing this value. 0 = use seed.
  std::uint64_t embed_seed = 0;

  std::uint64_t effective_embed_seed() const { return embed_seed == 0 ? seed : embed_seed; }

  void validate() const {
    scale.validate();
    const RankScale expected = family_scale(family);
    if (scale.value_lo != expected.value_lo || scale.value_hi != expected.value_hi) {
      throw ConfigInvalid(std::string("TaskSpec: ") + family_name(family) +
                          " requires scale range [" + std::to_string(expected.value_lo) + ", " +
                          std::to_string(expected.value_hi) + "]");
    }
    if (feature_dim < 1) throw ConfigInvalid("TaskSpec: feature_dim must be >= 1");
    if (noise_sigma < 0.0) throw ConfigInvalid("TaskSpec: noise_sigma must be >= 0");
    if (batch_n < 1) throw ConfigInvalid("TaskSpec: batch_n must be >= 1");
  }
};

struct TaskBatch {
  ItemBatch batch;
  FeatureMatrix features;  // one row per item, in item order
};

// Fixed random embedding of a normalized label into feature space:
// coordinate 0 is constant 1 (an effective bias for linear heads), the rest
// mix a linear ramp with sinusoids from a small frequency set, so the label
// stays linearly recoverable while the map is not purely linear.
struct FeatureEmbedding {
  double value_lo = 0.0;
  double value_hi = 1.0;
  std::vector<double> slope;      // per coordinate
  std::vector<double> amplitude;  // per coordinate
  std::vector<double> frequency;  // per coordinate, cycles over [lo, hi]
  std::vector<double> phase;      // per coordinate

  static FeatureEmbedding make(const RankScale& scale, std::size_t dim, std::uint64_t embed_seed) {
    FeatureEmbedding e;
    e.value_lo = scale.value_lo;
    e.value_hi = scale.value_hi;
    e.slope.resize(dim);
    e.amplitude.resize(dim);
    e.frequency.resize(dim);
    e.phase.resize(dim);
    Rng rng(mix_seed(embed_seed, 0xe1b0u));
    for (std::size_t j = 1; j < dim; ++j) {
      e.slope[j] = uniform_real(rng, -1.0, 1.0);
      e.amplitude[j] = uniform_real(rng, 0.2, 0.6);
      e.frequency[j] = static_cast<double>(1 + (j - 1) % 3);
      e.phase[j] = uniform_real(rng, 0.0, 2.0 * M_PI);
    }
    return e;
  }

  FeatureVec embed(double y) const {
    const double t = (y - value_lo) / (value_hi - value_lo);
    FeatureVec x(slope.size());
    x[0] = 1.0;
    for (std::size_t j = 1; j < x.size(); ++j) {
      x[j] = slope[j] * t + amplitude[j] * std::sin(2.0 * M_PI * frequency[j] * t + phase[j]);
    }
    return x;
  }
};

namespace detail {

inline std::string make_batch_id(const TaskSpec& spec, std::size_t index, const char* tag) {
  std::ostringstream out;
  out << family_name(spec.family) << tag << "-" << spec.seed << "-";
  std::string num = std::to_string(index);
  while (num.size() < 6) num.insert(num.begin(), '0');
  out << num;
  return out.str();
}

inline TaskBatch build_batch(const TaskSpec& spec, const FeatureEmbedding& embedding,
                             const std::vector<double>& truths, const std::string& batch_id,
                             Rng& noise_rng) {
  TaskBatch tb;
  tb.batch.batch_id = batch_id;
  tb.batch.scale = spec.scale;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    tb.batch.items.push_back({static_cast<int>(i + 1), truths[i]});
    FeatureVec x = embedding.embed(truths[i]);
    for (double& v : x) v += spec.noise_sigma * normal01(noise_rng);
    tb.features.push_back(std::move(x));
  }
  std::vector<std::pair<int, double>> id_truth;
  for (const auto& item : tb.batch.items) id_truth.emplace_back(item.image_id, item.truth_value);
  tb.batch.truth_perm = order_by_value(id_truth);
  tb.batch.validate();
  return tb;
}

}  // namespace detail

// Seeded synthetic batches: truths uniform over the scale, features from the
// fixed embedding plus gaussian noise. Pure function of the spec; batch b
// draws through the stream mix_seed(seed, b).
inline std::vector<TaskBatch> generate(const TaskSpec& spec) {
  spec.validate();
  const FeatureEmbedding embedding =
      FeatureEmbedding::make(spec.scale, spec.feature_dim, spec.effective_embed_seed());
  std::vector<TaskBatch> out;
  out.reserve(spec.num_batches);
  for (std::size_t b = 0; b < spec.num_batches; ++b) {
    Rng rng(mix_seed(spec.seed, 0xba7cu, b));
    std::vector<double> truths(spec.batch_n);
    for (double& y : truths) y = uniform_real(rng, spec.scale.value_lo, spec.scale.value_hi);
    out.push_back(
        detail::build_batch(spec, embedding, truths, detail::make_batch_id(spec, b, ""), rng));
  }
  return out;
}

// Batches engineered so that every response the given (untrained) policy can
// emit scores identically: truths sit at midpoints between adjacent bin
// centers, strictly farther than delta from every reachable value. Each
// batch is verified by rolling out `group_size` responses and checking the
// reward spread; any variance above eps fails the construction.
inline std::vector<TaskBatch> saddle_task(const TaskSpec& spec, const PolicyParams& policy,
                                          const RewardConfig& reward_cfg, std::size_t group_size,
                                          double eps = 1e-8) {
  spec.validate();
  policy.validate();
  reward_cfg.validate();
  const FeatureEmbedding embedding =
      FeatureEmbedding::make(spec.scale, spec.feature_dim, spec.effective_embed_seed());

  std::vector<double> midpoints;
  for (std::size_t k = 0; k + 1 < policy.bin_centers.size(); ++k) {
    midpoints.push_back(0.5 * (policy.bin_centers[k] + policy.bin_centers[k + 1]));
  }
  if (midpoints.empty()) throw ConstructionFailed("saddle_task: policy has fewer than 2 bins");

  std::vector<TaskBatch> out;
  out.reserve(spec.num_batches);
  for (std::size_t b = 0; b < spec.num_batches; ++b) {
    Rng rng(mix_seed(spec.seed, 0x5addu, b));
    std::vector<double> truths(spec.batch_n);
    for (double& y : truths) {
      y = midpoints[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(midpoints.size())) %
                    midpoints.size()];
    }
    out.push_back(
        detail::build_batch(spec, embedding, truths, detail::make_batch_id(spec, b, "-saddle"), rng));

    // verification rollout: the initial policy must score this batch flat
    const TaskBatch& tb = out.back();
    Rng verify_rng(mix_seed(spec.seed, 0x5e1fu, b));
    const std::vector<int> ids = tb.batch.ids();
    std::vector<double> rewards;
    rewards.reserve(group_size);
    for (std::size_t g = 0; g < group_size; ++g) {
      const SampleResult s = sample_response(policy, tb.features, ids, verify_rng);
      rewards.push_back(final_reward(s.response, tb.batch, reward_cfg).final);
    }
    if (population_std(rewards) >= eps) {
      throw ConstructionFailed("saddle_task: batch " + tb.batch.batch_id +
                               " has reward variance above eps; widen the bin grid or tighten "
                               "delta");
    }
  }
  return out;
}

// --- JSONL dump/load --------------------------------------------------------

inline nlohmann::json batch_to_json(const TaskBatch& tb) {
  nlohmann::json j;
  j["batch_id"] = tb.batch.batch_id;
  j["scale"] = {{"num_ranks", tb.batch.scale.num_ranks},
                {"lo", tb.batch.scale.value_lo},
                {"hi", tb.batch.scale.value_hi}};
  std::vector<int> ids;
  std::vector<double> truths;
  for (const auto& item : tb.batch.items) {
    ids.push_back(item.image_id);
    truths.push_back(item.truth_value);
  }
  j["ids"] = ids;
  j["truths"] = truths;
  j["truth_perm"] = tb.batch.truth_perm.order;
  j["features"] = tb.features;
  return j;
}

inline TaskBatch batch_from_json(const nlohmann::json& j) {
  TaskBatch tb;
  tb.batch.batch_id = j.at("batch_id").get<std::string>();
  tb.batch.scale.num_ranks = j.at("scale").at("num_ranks").get<int>();
  tb.batch.scale.value_lo = j.at("scale").at("lo").get<double>();
  tb.batch.scale.value_hi = j.at("scale").at("hi").get<double>();
  const auto ids = j.at("ids").get<std::vector<int>>();
  const auto truths = j.at("truths").get<std::vector<double>>();
  if (ids.size() != truths.size()) throw IoError("batch_from_json: ids/truths length mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    tb.batch.items.push_back({ids[i], truths[i]});
  }
  tb.batch.truth_perm.order = j.at("truth_perm").get<std::vector<int>>();
  if (j.contains("features")) tb.features = j.at("features").get<FeatureMatrix>();
  tb.batch.validate();
  return tb;
}

inline void dump_batches(const std::vector<TaskBatch>& batches, std::ostream& out) {
  for (const auto& tb : batches) out << batch_to_json(tb).dump() << "\n";
}

inline void dump_batches(const std::vector<TaskBatch>& batches, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("dump_batches: cannot open " + path);
  dump_batches(batches, out);
}

inline std::vector<TaskBatch> load_batches(std::istream& in) {
  std::vector<TaskBatch> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw IoError("load_batches: invalid JSON on line " + std::to_string(lineno));
    }
    out.push_back(batch_from_json(j));
  }
  return out;
}

inline std::vector<TaskBatch> load_batches(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_batches: cannot open " + path);
  return load_batches(in);
}

}  // namespace rarl
