#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "rarl/errors.hpp"
#include "rarl/ordinal.hpp"
#include "rarl/policy.hpp"
#include "rarl/response.hpp"
#include "rarl/reward.hpp"
#include "rarl/rng.hpp"

namespace rarl {

struct GrpoConfig {
  std::size_t group_size = 8;     // G
  double kl_coeff = 0.01;         // beta
  double learning_rate = 1e-6;
  std::size_t batch_size = 64;    // prompts per step
  double degenerate_eps = 1e-8;   // std threshold below which a group is degenerate
  std::size_t rmo_k = 2;          // k lowest-reward candidates per group
  bool rmo_enabled = true;
  double p_mut = 0.25;            // mutation probability, non-degenerate groups
  double p_mut_degenerate = 1.0;  // mutation probability when the group is degenerate
  double kl_clamp = 30.0;         // per-decision cap when the reference assigns ~0 mass
  std::string optimizer = "adamw";  // "adamw" or "sgd"
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (group_size < 2) throw ConfigInvalid("GrpoConfig: group_size must be >= 2");
    if (rmo_k >= group_size) throw ConfigInvalid("GrpoConfig: rmo_k must be < group_size");
    if (!(kl_coeff >= 0.0)) throw ConfigInvalid("GrpoConfig: kl_coeff must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigInvalid("GrpoConfig: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigInvalid("GrpoConfig: batch_size must be >= 1");
    if (!(degenerate_eps > 0.0)) throw ConfigInvalid("GrpoConfig: degenerate_eps must be > 0");
    if (p_mut < 0.0 || p_mut > 1.0 || p_mut_degenerate < 0.0 || p_mut_degenerate > 1.0) {
      throw ConfigInvalid("GrpoConfig: mutation probabilities must be in [0,1]");
    }
    if (optimizer != "adamw" && optimizer != "sgd") {
      throw ConfigInvalid("GrpoConfig: optimizer must be 'adamw' or 'sgd'");
    }
  }
};

// G responses to one prompt with their rewards, advantages and mutation
// flags.
struct ResponseGroup {
  std::string batch_id;
  std::vector<ParsedResponse> responses;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<bool> mutated;

  std::size_t size() const { return responses.size(); }
};

inline double population_std(const std::vector<double>& values) {
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / n);
}

// Intra-group standardization; a group whose reward spread is below eps is
// degenerate and yields all-zero advantages (the vanishing-gradient saddle).
inline std::vector<double> group_advantages(const std::vector<double>& rewards, double eps) {
  if (rewards.size() < 2) throw GroupTooSmall("group_advantages: need at least 2 rewards");
  for (double r : rewards) {
    if (!std::isfinite(r)) throw ConfigInvalid("group_advantages: non-finite reward");
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  const double sd = population_std(rewards);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < eps) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

// The ground-truth reference answer as raw text: exact truth values in
// ascending truth order.
inline ParsedResponse exact_truth_response(const ItemBatch& batch) {
  std::vector<std::pair<int, double>> entries;
  for (int id : batch.truth_perm.order) entries.emplace_back(id, batch.truth_value_of(id));
  const std::vector<int> ids = batch.ids();
  return parse_response(serialize_response(entries, think_placeholder()),
                        std::set<int>(ids.begin(), ids.end()));
}

using MutationPayload = std::function<ParsedResponse(const ItemBatch&)>;

// Replaces up to k lowest-reward responses with the reference answer, each
// independently with the configured probability, then recomputes rewards and
// re-standardizes advantages over the post-mutation reward multiset.
inline ResponseGroup apply_rmo(const ResponseGroup& group, const ItemBatch& batch,
                               const GrpoConfig& cfg, const RewardConfig& cfg_r, Rng& rng,
                               const MutationPayload& payload = exact_truth_response) {
  ResponseGroup out = group;
  if (out.mutated.size() != out.size()) out.mutated.assign(out.size(), false);
  if (!cfg.rmo_enabled || cfg.rmo_k == 0) {
    return out;
  }
  if (out.size() < 2) throw GroupTooSmall("apply_rmo: group smaller than 2");

  const bool degenerate = population_std(out.rewards) < cfg.degenerate_eps;
  const double p = degenerate ? cfg.p_mut_degenerate : cfg.p_mut;

  std::vector<std::size_t> idx(out.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (out.rewards[a] != out.rewards[b]) return out.rewards[a] < out.rewards[b];
    return a < b;
  });
  idx.resize(std::min(cfg.rmo_k, idx.size()));
  std::sort(idx.begin(), idx.end());  // fixed draw order for reproducibility

  for (std::size_t i : idx) {
    if (uniform01(rng) < p) {
      out.responses[i] = payload(batch);
      out.rewards[i] = final_reward(out.responses[i], batch, cfg_r).final;
      out.mutated[i] = true;
    }
  }
  out.advantages = group_advantages(out.rewards, cfg.degenerate_eps);
  return out;
}

namespace detail {

// Exact categorical KL with the 0*log(0) = 0 convention, clamped at cap so
// reference support gaps keep steps finite.
inline double categorical_kl(const std::vector<double>& p, const std::vector<double>& q,
                             double cap) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return cap;
    kl += p[i] * std::log(p[i] / q[i]);
  }
  if (!std::isfinite(kl) || kl > cap) return cap;
  return std::max(kl, 0.0);
}

inline void check_same_structure(const DecisionDists& a, const DecisionDists& b) {
  if (a.decisions.size() != b.decisions.size()) {
    throw DistributionMismatch("kl_penalty: decision count mismatch");
  }
  for (std::size_t i = 0; i < a.decisions.size(); ++i) {
    if (a.decisions[i].size() != b.decisions[i].size()) {
      throw DistributionMismatch("kl_penalty: category count mismatch at decision " +
                                 std::to_string(i));
    }
    for (const auto* d : {&a.decisions[i], &b.decisions[i]}) {
      double sum = 0.0;
      for (double v : *d) {
        if (v < 0.0) throw DistributionMismatch("kl_penalty: negative probability");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-6) {
        throw DistributionMismatch("kl_penalty: distribution not normalized");
      }
    }
  }
}

}  // namespace detail

// Mean exact categorical KL(policy || reference) over matched decisions.
inline double kl_penalty(const DecisionDists& policy_dists, const DecisionDists& ref_dists,
                         double cap = 30.0) {
  detail::check_same_structure(policy_dists, ref_dists);
  if (policy_dists.decisions.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < policy_dists.decisions.size(); ++i) {
    sum += detail::categorical_kl(policy_dists.decisions[i], ref_dists.decisions[i], cap);
  }
  return sum / static_cast<double>(policy_dists.decisions.size());
}

// One prompt's sampled group together with everything needed to rebuild
// log-probabilities: the batch, its features, and the per-response actions.
struct GroupRollout {
  const ItemBatch* batch = nullptr;
  const FeatureMatrix* features = nullptr;
  ResponseGroup group;
  std::vector<PolicyAction> actions;
};

struct StepStats {
  double mean_reward = 0.0;
  double mean_abs_adv = 0.0;
  double grad_norm = 0.0;
  double kl = 0.0;
  std::size_t mutations = 0;
  int stage = 0;  // filled by the harness
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  static AdamState zeros(std::size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }
};

namespace detail {

// Per-response KL summed over decisions plus its gradient w.r.t. the live
// policy. Clamped decisions contribute the cap with zero gradient.
struct KlTerm {
  double kl_sum = 0.0;
  std::size_t decisions = 0;
  PolicyGrad grad;  // gradient of kl_sum
};

inline KlTerm kl_term_and_grad(const PolicyParams& policy, const PolicyParams& ref,
                               const FeatureMatrix& features, const std::vector<int>& ids,
                               const PolicyAction& action, double cap) {
  KlTerm out;
  out.grad = PolicyGrad::zeros(policy);
  const double inv_t = 1.0 / policy.temperature;
  const DecisionDists dp = decision_dists(policy, features, ids, action);
  const DecisionDists dq = decision_dists(ref, features, ids, action);
  check_same_structure(dp, dq);
  out.decisions = dp.decisions.size();

  const std::size_t n = features.size();
  std::unordered_map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < ids.size(); ++i) row_of[ids[i]] = i;

  for (std::size_t d = 0; d < dp.decisions.size(); ++d) {
    const auto& p = dp.decisions[d];
    const auto& q = dq.decisions[d];
    const double kl = categorical_kl(p, q, cap);
    out.kl_sum += kl;
    bool clamped = kl >= cap;
    if (!clamped) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0 && q[i] <= 0.0) clamped = true;
      }
    }
    if (clamped) continue;

    if (d < n) {
      // value-bin decision for item d
      for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] <= 0.0) continue;
        const double coeff = p[k] * (std::log(p[k] / q[k]) - kl) * inv_t;
        for (std::size_t j = 0; j < policy.feature_dim; ++j) {
          out.grad.value_head[k * policy.feature_dim + j] += coeff * features[d][j];
        }
      }
    } else {
      // Plackett-Luce slot decision; rebuild the remaining candidate rows
      const std::size_t slot = d - n;
      std::vector<bool> used(n, false);
      for (std::size_t s = 0; s < slot; ++s) used[row_of.at(action.perm[s])] = true;
      std::vector<std::size_t> remaining;
      for (std::size_t i = 0; i < n; ++i) {
        if (!used[i]) remaining.push_back(i);
      }
      for (std::size_t j = 0; j < remaining.size(); ++j) {
        if (p[j] <= 0.0) continue;
        const double coeff = p[j] * (std::log(p[j] / q[j]) - kl) * inv_t;
        for (std::size_t f = 0; f < policy.feature_dim; ++f) {
          out.grad.rank_head[f] += coeff * features[remaining[j]][f];
        }
      }
    }
  }
  return out;
}

}  // namespace detail

struct GradientEstimate {
  PolicyGrad grad;      // ascent direction: mean advantage-weighted score minus beta * grad KL
  double kl = 0.0;      // mean per-decision KL across all responses
  double grad_norm = 0.0;
};

// mean_i A_i * grad log pi(o_i) - beta * grad mean KL(pi || ref), over every
// response of every group.
inline GradientEstimate grpo_gradient(const PolicyParams& policy, const PolicyParams& ref,
                                      const std::vector<GroupRollout>& rollouts,
                                      const GrpoConfig& cfg) {
  GradientEstimate est;
  est.grad = PolicyGrad::zeros(policy);
  std::size_t total_responses = 0;
  for (const auto& r : rollouts) total_responses += r.group.size();
  if (total_responses == 0) return est;

  for (const auto& rollout : rollouts) {
    const std::vector<int> ids = rollout.batch->ids();
    for (std::size_t i = 0; i < rollout.group.size(); ++i) {
      const double adv = rollout.group.advantages[i];
      if (adv != 0.0) {
        auto [logp, g] = log_prob_and_grad(policy, rollout.actions[i], *rollout.features, ids);
        (void)logp;
        est.grad.axpy(adv / static_cast<double>(total_responses), g);
      }
    }
  }

  double kl_sum = 0.0;
  std::size_t kl_decisions = 0;
  PolicyGrad kl_grad = PolicyGrad::zeros(policy);
  for (const auto& rollout : rollouts) {
    const std::vector<int> ids = rollout.batch->ids();
    for (std::size_t i = 0; i < rollout.group.size(); ++i) {
      const detail::KlTerm term = detail::kl_term_and_grad(
          policy, ref, *rollout.features, ids, rollout.actions[i], cfg.kl_clamp);
      kl_sum += term.kl_sum;
      kl_decisions += term.decisions;
      kl_grad.axpy(1.0, term.grad);
    }
  }
  if (kl_decisions > 0) {
    est.kl = kl_sum / static_cast<double>(kl_decisions);
    if (cfg.kl_coeff > 0.0) {
      est.grad.axpy(-cfg.kl_coeff / static_cast<double>(kl_decisions), kl_grad);
    }
  }

  double norm = 0.0;
  for (double v : est.grad.flatten()) norm += v * v;
  est.grad_norm = std::sqrt(norm);
  return est;
}

// One first-order ascent step on the policy parameters. Gradients are
// accumulated in fixed rollout order, so results are reproducible for a
// given seed.
inline StepStats grpo_step(PolicyParams& policy, const PolicyParams& ref,
                           const std::vector<GroupRollout>& rollouts, const GrpoConfig& cfg,
                           AdamState& opt) {
  cfg.validate();
  const GradientEstimate est = grpo_gradient(policy, ref, rollouts, cfg);

  StepStats stats;
  std::size_t total = 0;
  for (const auto& r : rollouts) {
    for (std::size_t i = 0; i < r.group.size(); ++i) {
      stats.mean_reward += r.group.rewards[i];
      stats.mean_abs_adv += std::abs(r.group.advantages[i]);
      if (r.group.mutated[i]) ++stats.mutations;
      ++total;
    }
  }
  if (total > 0) {
    stats.mean_reward /= static_cast<double>(total);
    stats.mean_abs_adv /= static_cast<double>(total);
  }
  stats.kl = est.kl;
  stats.grad_norm = est.grad_norm;

  std::vector<double> g = est.grad.flatten();
  for (double v : g) {
    if (!std::isfinite(v)) {
      throw NonFiniteGradient("grpo_step: non-finite gradient component (grad_norm=" +
                              std::to_string(est.grad_norm) + ")");
    }
  }

  std::vector<double> params = policy.flatten();
  if (opt.m.size() != params.size()) opt = AdamState::zeros(params.size());
  if (cfg.optimizer == "sgd") {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += cfg.learning_rate * g[i];
  } else {
    opt.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g[i];
      opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = opt.m[i] / bc1;
      const double vhat = opt.v[i] / bc2;
      params[i] += cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps) -
                   cfg.learning_rate * cfg.weight_decay * params[i];
    }
  }
  for (double v : params) {
    if (!std::isfinite(v)) throw NonFiniteGradient("grpo_step: non-finite parameter after update");
  }
  policy.unflatten(params);
  return stats;
}

}  // namespace rarl
