#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rarl/errors.hpp"
#include "rarl/ordinal.hpp"
#include "rarl/response.hpp"
#include "rarl/rng.hpp"

namespace rarl {

using FeatureVec = std::vector<double>;
using FeatureMatrix = std::vector<FeatureVec>;  // one row per item, in item order

// Linear two-headed stochastic policy. The value head maps features to K
// bin logits; the rank head maps features to a scalar score driving a
// Plackett-Luce distribution over permutations. The two heads can disagree,
// which is what the consistency reward trains against.
struct PolicyParams {
  std::size_t feature_dim = 0;       // d
  std::size_t num_bins = 0;          // K
  double temperature = 1.0;          // > 0, shared by both heads
  std::vector<double> bin_centers;   // K strictly increasing values
  std::vector<double> value_head;    // K x d row-major
  std::vector<double> rank_head;     // d

  void validate() const {
    if (num_bins < 2) throw ConfigInvalid("PolicyParams: num_bins must be >= 2");
    if (feature_dim < 1) throw ConfigInvalid("PolicyParams: feature_dim must be >= 1");
    if (!(temperature > 0.0)) throw ConfigInvalid("PolicyParams: temperature must be > 0");
    if (bin_centers.size() != num_bins) throw ConfigInvalid("PolicyParams: bin_centers size");
    for (std::size_t i = 1; i < bin_centers.size(); ++i) {
      if (!(bin_centers[i - 1] < bin_centers[i])) {
        throw ConfigInvalid("PolicyParams: bin_centers must be strictly increasing");
      }
    }
    if (value_head.size() != num_bins * feature_dim) {
      throw ConfigInvalid("PolicyParams: value_head size");
    }
    if (rank_head.size() != feature_dim) throw ConfigInvalid("PolicyParams: rank_head size");
  }

  std::size_t param_count() const { return value_head.size() + rank_head.size(); }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    flat.insert(flat.end(), value_head.begin(), value_head.end());
    flat.insert(flat.end(), rank_head.begin(), rank_head.end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != param_count()) throw ConfigInvalid("PolicyParams: flat size mismatch");
    std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(value_head.size()),
              value_head.begin());
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(value_head.size()), flat.end(),
              rank_head.begin());
  }

  int nearest_bin(double value) const {
    int best = 0;
    double best_dist = std::abs(bin_centers[0] - value);
    for (std::size_t k = 1; k < bin_centers.size(); ++k) {
      const double dist = std::abs(bin_centers[k] - value);
      if (dist < best_dist) {
        best = static_cast<int>(k);
        best_dist = dist;
      }
    }
    return best;
  }
};

// Zero-initialized policy whose bins form a uniform grid over the scale.
inline PolicyParams make_policy(const RankScale& scale, std::size_t num_bins, double temperature,
                                std::size_t feature_dim) {
  scale.validate();
  PolicyParams p;
  p.feature_dim = feature_dim;
  p.num_bins = num_bins;
  p.temperature = temperature;
  p.bin_centers.resize(num_bins);
  for (std::size_t k = 0; k < num_bins; ++k) {
    p.bin_centers[k] = scale.value_lo + (scale.value_hi - scale.value_lo) * static_cast<double>(k) /
                                            static_cast<double>(num_bins - 1);
  }
  p.value_head.assign(num_bins * feature_dim, 0.0);
  p.rank_head.assign(feature_dim, 0.0);
  p.validate();
  return p;
}

// A realized joint action: one value bin per item plus an explicit ordering.
struct PolicyAction {
  std::vector<int> value_bins;  // aligned with the item/feature order
  std::vector<int> perm;        // image ids, first = predicted smallest
};

// Gradient of a scalar with respect to all trainable parameters.
struct PolicyGrad {
  std::vector<double> value_head;  // K x d
  std::vector<double> rank_head;   // d

  static PolicyGrad zeros(const PolicyParams& p) {
    PolicyGrad g;
    g.value_head.assign(p.value_head.size(), 0.0);
    g.rank_head.assign(p.rank_head.size(), 0.0);
    return g;
  }

  void axpy(double alpha, const PolicyGrad& other) {
    for (std::size_t i = 0; i < value_head.size(); ++i) value_head[i] += alpha * other.value_head[i];
    for (std::size_t i = 0; i < rank_head.size(); ++i) rank_head[i] += alpha * other.rank_head[i];
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(value_head.size() + rank_head.size());
    flat.insert(flat.end(), value_head.begin(), value_head.end());
    flat.insert(flat.end(), rank_head.begin(), rank_head.end());
    return flat;
  }
};

// The categorical distributions at every stochastic decision of one
// response: N value-bin choices followed by the Plackett-Luce slot choices
// that still had at least two candidates.
struct DecisionDists {
  std::vector<std::vector<double>> decisions;
};

namespace detail {

inline std::vector<double> softmax_scaled(const std::vector<double>& logits, double temperature) {
  std::vector<double> out(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline double dot(const std::vector<double>& a, const FeatureVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Bin probabilities for one feature vector.
inline std::vector<double> value_bin_probs(const PolicyParams& p, const FeatureVec& x) {
  std::vector<double> logits(p.num_bins);
  for (std::size_t k = 0; k < p.num_bins; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < p.feature_dim; ++j) s += p.value_head[k * p.feature_dim + j] * x[j];
    logits[k] = s;
  }
  return detail::softmax_scaled(logits, p.temperature);
}

inline std::vector<double> rank_scores(const PolicyParams& p, const FeatureMatrix& features) {
  std::vector<double> s(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) s[i] = detail::dot(p.rank_head, features[i]);
  return s;
}

// Log-probability of drawing `order` (indices into scores) by sequential
// sampling without replacement proportional to exp(score/temperature).
inline double plackett_luce_log_prob(const std::vector<double>& scores,
                                     const std::vector<std::size_t>& order, double temperature) {
  double logp = 0.0;
  std::vector<bool> used(scores.size(), false);
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!used[i]) mx = std::max(mx, scores[i] / temperature);
    }
    double denom = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!used[i]) denom += std::exp(scores[i] / temperature - mx);
    }
    const std::size_t chosen = order[slot];
    logp += scores[chosen] / temperature - mx - std::log(denom);
    used[chosen] = true;
  }
  return logp;
}

inline const char* think_placeholder() {
  return "Estimating a value for each image, then ordering the images by those estimates.";
}

struct SampleResult {
  ParsedResponse response;
  PolicyAction action;
  DecisionDists dists;  // distributions under the sampled policy
  double log_prob = 0.0;
};

namespace detail {

// Distribution of each decision along a fixed action path. Shared by
// sampling, scoring and KL evaluation so the decision structure always
// matches between policies.
inline DecisionDists decision_dists_impl(const PolicyParams& p, const FeatureMatrix& features,
                                         const std::vector<int>& ids, const PolicyAction& action) {
  DecisionDists dd;
  for (std::size_t i = 0; i < features.size(); ++i) {
    dd.decisions.push_back(value_bin_probs(p, features[i]));
  }
  const std::vector<double> scores = rank_scores(p, features);
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = i;
  std::vector<bool> used(features.size(), false);
  for (std::size_t slot = 0; slot + 1 < action.perm.size(); ++slot) {
    std::vector<double> logits;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!used[i]) logits.push_back(scores[i]);
    }
    dd.decisions.push_back(softmax_scaled(logits, p.temperature));
    used[row_of.at(action.perm[slot])] = true;
  }
  return dd;
}

}  // namespace detail

inline DecisionDists decision_dists(const PolicyParams& p, const FeatureMatrix& features,
                                    const std::vector<int>& ids, const PolicyAction& action) {
  return detail::decision_dists_impl(p, features, ids, action);
}

// Draws one full response: a value bin per item, then a permutation via
// Plackett-Luce, serialized through the tag + JSON wire format.
inline SampleResult sample_response(const PolicyParams& p, const FeatureMatrix& features,
                                    const std::vector<int>& ids, Rng& rng) {
  p.validate();
  const std::size_t n = features.size();
  if (n == 0 || ids.size() != n) throw ConfigInvalid("sample_response: bad batch shape");

  SampleResult out;
  out.action.value_bins.resize(n);
  double logp = 0.0;

  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> probs = value_bin_probs(p, features[i]);
    const std::size_t bin = sample_categorical(rng, probs);
    out.action.value_bins[i] = static_cast<int>(bin);
    logp += std::log(probs[bin]);
  }

  const std::vector<double> scores = rank_scores(p, features);
  std::vector<std::size_t> remaining(n);
  for (std::size_t i = 0; i < n; ++i) remaining[i] = i;
  for (std::size_t slot = 0; slot < n; ++slot) {
    std::vector<double> logits(remaining.size());
    for (std::size_t j = 0; j < remaining.size(); ++j) logits[j] = scores[remaining[j]];
    const std::vector<double> probs = detail::softmax_scaled(logits, p.temperature);
    const std::size_t pick = remaining.size() == 1 ? 0 : sample_categorical(rng, probs);
    logp += std::log(probs[pick]);
    out.action.perm.push_back(ids[remaining[pick]]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }

  std::vector<std::pair<int, double>> entries;
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < n; ++i) row_of[ids[i]] = i;
  for (int id : out.action.perm) {
    entries.emplace_back(id, p.bin_centers[static_cast<std::size_t>(
                                 out.action.value_bins[row_of.at(id)])]);
  }
  const std::string raw = serialize_response(entries, think_placeholder());
  out.response = parse_response(raw, std::set<int>(ids.begin(), ids.end()));
  out.dists = detail::decision_dists_impl(p, features, ids, out.action);
  out.log_prob = logp;
  return out;
}

namespace detail {

inline void check_action(const PolicyParams& p, const PolicyAction& action,
                         const FeatureMatrix& features, const std::vector<int>& ids) {
  const std::size_t n = features.size();
  if (ids.size() != n || action.value_bins.size() != n || action.perm.size() != n) {
    throw InconsistentAction("action shape does not match the batch");
  }
  for (int b : action.value_bins) {
    if (b < 0 || static_cast<std::size_t>(b) >= p.num_bins) {
      throw InconsistentAction("value bin index out of range");
    }
  }
  std::set<int> perm_ids(action.perm.begin(), action.perm.end());
  if (perm_ids != std::set<int>(ids.begin(), ids.end())) {
    throw InconsistentAction("perm is not a permutation of the batch ids");
  }
  for (const auto& x : features) {
    if (x.size() != p.feature_dim) throw InconsistentAction("feature dimension mismatch");
  }
}

}  // namespace detail

// Joint log-probability of an action under the policy.
inline double log_prob(const PolicyParams& p, const PolicyAction& action,
                       const FeatureMatrix& features, const std::vector<int>& ids) {
  detail::check_action(p, action, features, ids);
  double logp = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const std::vector<double> probs = value_bin_probs(p, features[i]);
    logp += std::log(probs[static_cast<std::size_t>(action.value_bins[i])]);
  }
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = i;
  std::vector<std::size_t> order;
  order.reserve(action.perm.size());
  for (int id : action.perm) order.push_back(row_of.at(id));
  logp += plackett_luce_log_prob(rank_scores(p, features), order, p.temperature);
  return logp;
}

// Exact gradient of the joint log-probability: softmax identities for the
// value head plus the Plackett-Luce sum over shrinking candidate sets.
inline std::pair<double, PolicyGrad> log_prob_and_grad(const PolicyParams& p,
                                                       const PolicyAction& action,
                                                       const FeatureMatrix& features,
                                                       const std::vector<int>& ids) {
  detail::check_action(p, action, features, ids);
  PolicyGrad grad = PolicyGrad::zeros(p);
  double logp = 0.0;
  const double inv_t = 1.0 / p.temperature;

  for (std::size_t i = 0; i < features.size(); ++i) {
    const std::vector<double> probs = value_bin_probs(p, features[i]);
    const std::size_t chosen = static_cast<std::size_t>(action.value_bins[i]);
    logp += std::log(probs[chosen]);
    for (std::size_t k = 0; k < p.num_bins; ++k) {
      const double coeff = ((k == chosen ? 1.0 : 0.0) - probs[k]) * inv_t;
      for (std::size_t j = 0; j < p.feature_dim; ++j) {
        grad.value_head[k * p.feature_dim + j] += coeff * features[i][j];
      }
    }
  }

  const std::vector<double> scores = rank_scores(p, features);
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = i;
  std::vector<double> dscore(features.size(), 0.0);
  std::vector<bool> used(features.size(), false);
  for (std::size_t slot = 0; slot < action.perm.size(); ++slot) {
    std::vector<std::size_t> remaining;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (!used[i]) remaining.push_back(i);
    }
    std::vector<double> logits(remaining.size());
    for (std::size_t j = 0; j < remaining.size(); ++j) logits[j] = scores[remaining[j]];
    const std::vector<double> probs = detail::softmax_scaled(logits, p.temperature);
    const std::size_t chosen_row = row_of.at(action.perm[slot]);
    bool found = false;
    double chosen_prob = 0.0;
    for (std::size_t j = 0; j < remaining.size(); ++j) {
      const bool is_chosen = remaining[j] == chosen_row;
      dscore[remaining[j]] += ((is_chosen ? 1.0 : 0.0) - probs[j]) * inv_t;
      if (is_chosen) {
        found = true;
        chosen_prob = probs[j];
      }
    }
    if (!found) throw InconsistentAction("perm repeats an id");
    logp += std::log(chosen_prob);
    used[chosen_row] = true;
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t j = 0; j < p.feature_dim; ++j) {
      grad.rank_head[j] += dscore[i] * features[i][j];
    }
  }
  return {logp, std::move(grad)};
}

// The ground-truth reference answer expressed in the policy's own action
// space: truth values snapped to the nearest bin, items in ascending truth
// order.
struct CanonicalResponse {
  ParsedResponse response;
  PolicyAction action;
};

inline CanonicalResponse canonical_truth_response(const PolicyParams& p, const ItemBatch& batch) {
  batch.validate();
  CanonicalResponse out;
  out.action.value_bins.resize(batch.items.size());
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    out.action.value_bins[i] = p.nearest_bin(batch.items[i].truth_value);
  }
  out.action.perm = batch.truth_perm.order;
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < batch.items.size(); ++i) row_of[batch.items[i].image_id] = i;
  std::vector<std::pair<int, double>> entries;
  for (int id : batch.truth_perm.order) {
    entries.emplace_back(
        id, p.bin_centers[static_cast<std::size_t>(out.action.value_bins[row_of.at(id)])]);
  }
  const std::vector<int> ids = batch.ids();
  out.response = parse_response(serialize_response(entries, think_placeholder()),
                                std::set<int>(ids.begin(), ids.end()));
  return out;
}

// Greedy (temperature -> 0) decoding: argmax bins, permutation by
// descending rank score with ascending-id tie breaks.
inline CanonicalResponse greedy_response(const PolicyParams& p, const FeatureMatrix& features,
                                         const std::vector<int>& ids) {
  const std::size_t n = features.size();
  CanonicalResponse out;
  out.action.value_bins.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> probs = value_bin_probs(p, features[i]);
    std::size_t best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k) {
      if (probs[k] > probs[best]) best = k;
    }
    out.action.value_bins[i] = static_cast<int>(best);
  }
  const std::vector<double> scores = rank_scores(p, features);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  std::vector<std::pair<int, double>> entries;
  for (std::size_t i : idx) {
    out.action.perm.push_back(ids[i]);
    entries.emplace_back(ids[i],
                         p.bin_centers[static_cast<std::size_t>(out.action.value_bins[i])]);
  }
  out.response = parse_response(serialize_response(entries, think_placeholder()),
                                std::set<int>(ids.begin(), ids.end()));
  return out;
}

// --- checkpoint io ---------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'R', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const PolicyParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  auto put = [&out](const void* data, std::size_t bytes) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  };
  put(kCheckpointMagic, sizeof(kCheckpointMagic));
  put(&kCheckpointVersion, sizeof(kCheckpointVersion));
  const std::uint64_t d = p.feature_dim, k = p.num_bins;
  put(&d, sizeof(d));
  put(&k, sizeof(k));
  put(&p.temperature, sizeof(double));
  put(p.bin_centers.data(), p.bin_centers.size() * sizeof(double));
  put(p.value_head.data(), p.value_head.size() * sizeof(double));
  put(p.rank_head.data(), p.rank_head.size() * sizeof(double));
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  auto get = [&in, &path](void* data, std::size_t bytes) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("load_checkpoint: truncated file " + path);
  };
  char magic[8];
  get(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path);
  }
  std::uint32_t version = 0;
  get(&version, sizeof(version));
  if (version != kCheckpointVersion) {
    throw IoError("load_checkpoint: unsupported version in " + path);
  }
  std::uint64_t d = 0, k = 0;
  get(&d, sizeof(d));
  get(&k, sizeof(k));
  PolicyParams p;
  p.feature_dim = static_cast<std::size_t>(d);
  p.num_bins = static_cast<std::size_t>(k);
  get(&p.temperature, sizeof(double));
  p.bin_centers.resize(p.num_bins);
  p.value_head.resize(p.num_bins * p.feature_dim);
  p.rank_head.resize(p.feature_dim);
  get(p.bin_centers.data(), p.bin_centers.size() * sizeof(double));
  get(p.value_head.data(), p.value_head.size() * sizeof(double));
  get(p.rank_head.data(), p.rank_head.size() * sizeof(double));
  p.validate();
  return p;
}

}  // namespace rarl
