#pragma once

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "rarl/errors.hpp"
#include "rarl/ordinal.hpp"
#include "rarl/response.hpp"

namespace rarl {

// Tolerance and mixture weights of the final reward.
struct RewardConfig {
  double delta = 5.0;        // regression tolerance, label units
  double lambda_reg = 1.0;   // weight of the regression term
  double lambda_rank = 1.0;  // weight of the ranking term
  double lambda_format = 1.0;

  void validate() const {
    if (!(delta > 0.0) || !std::isfinite(delta)) {
      throw ConfigInvalid("RewardConfig: delta must be finite and > 0");
    }
    for (double l : {lambda_reg, lambda_rank, lambda_format}) {
      if (!(l >= 0.0) || !std::isfinite(l)) {
        throw ConfigInvalid("RewardConfig: lambdas must be finite and >= 0");
      }
    }
  }

  // Tolerance defaults per task family, roughly 5% of the label range.
  static double default_delta_age() { return 5.0; }
  static double default_delta_count() { return 1.0; }
  static double default_delta_score() { return 0.5; }
};

// Every reward term for one response.
struct RewardBreakdown {
  std::vector<double> per_item_reg;  // one per ground-truth item
  double reg = 0.0;                  // mean of per_item_reg, in [0,1]
  double len = 0.0;                  // in [0,1]
  double consis = 0.0;               // in [0,1]
  double acc = 0.0;                  // in [0,1]
  double rank = 0.0;                 // len + consis + acc, in [0,3]
  double format = 0.0;               // in {0,1}
  double final = 0.0;                // lambda-weighted combination
};

// Quadratic falloff inside the tolerance window, zero outside. Maximum 1 at
// an exact match; 0.25 at the window boundary.
inline double regression_reward_item(double pred, double truth, double delta) {
  const double err = std::abs(pred - truth);
  if (err > delta) return 0.0;
  const double t = 1.0 - err / (2.0 * delta);
  return t * t;
}

// Per-item rewards over the ground-truth items; an item the response did not
// answer scores 0, and the mean is taken over all N items either way.
inline std::pair<std::vector<double>, double> regression_reward(const ParsedResponse& pr,
                                                                const ItemBatch& batch,
                                                                double delta) {
  std::unordered_map<int, double> pred_of;
  if (pr.format_ok) {
    for (const auto& [id, value] : pr.entries) pred_of[id] = value;
  }
  std::vector<double> per_item;
  per_item.reserve(batch.items.size());
  double sum = 0.0;
  for (const auto& item : batch.items) {
    auto it = pred_of.find(item.image_id);
    const double r =
        it == pred_of.end() ? 0.0 : regression_reward_item(it->second, item.truth_value, delta);
    per_item.push_back(r);
    sum += r;
  }
  const double mean = batch.items.empty() ? 0.0 : sum / static_cast<double>(batch.items.size());
  return {std::move(per_item), mean};
}

// 1 - (#truth - #pred)/#truth when the prediction is not over-length, else 0.
inline double length_reward(const Permutation& pred_perm, const Permutation& truth_perm) {
  const double np = static_cast<double>(pred_perm.size());
  const double nt = static_cast<double>(truth_perm.size());
  if (nt == 0.0) return 0.0;
  if (np > nt) return 0.0;
  return 1.0 - (nt - np) / nt;
}

// Agreement between the explicit ordering and the order implied by the
// predicted values, mapped from tau to [0,1]. Fewer than 2 shared ids
// carries no pairwise information and scores 0.
inline double consistency_reward(const Permutation& pred_perm,
                                 const std::vector<std::pair<int, double>>& pred_values) {
  if (pred_perm.size() < 2 || pred_values.size() < 2) return 0.0;
  const Permutation implied = order_by_value(pred_values);
  auto [a, b] = restrict_to_common(pred_perm, implied);
  if (a.size() < 2) return 0.0;
  return (kendall_tau(a, b) + 1.0) / 2.0;
}

// Agreement with the ground-truth ordering over the shared ids, mapped from
// tau to [0,1]. Length deficits are priced by length_reward, not here.
inline double accuracy_reward(const Permutation& pred_perm, const Permutation& truth_perm) {
  auto [a, b] = restrict_to_common(pred_perm, truth_perm);
  if (a.size() < 2) return 0.0;
  return (kendall_tau(a, b) + 1.0) / 2.0;
}

struct RankingTerms {
  double len = 0.0;
  double consis = 0.0;
  double acc = 0.0;
  double rank = 0.0;
};

// Composite ranking reward. An unparseable response has no meaningful
// permutation, so every term is gated to 0 on format failure.
inline RankingTerms ranking_reward(const ParsedResponse& pr, const ItemBatch& batch) {
  RankingTerms t;
  if (!pr.format_ok) return t;
  t.len = length_reward(pr.pred_perm, batch.truth_perm);
  t.consis = consistency_reward(pr.pred_perm, pr.entries);
  t.acc = accuracy_reward(pr.pred_perm, batch.truth_perm);
  t.rank = t.len + t.consis + t.acc;
  return t;
}

// Full breakdown: final = l1*reg + l2*rank + l3*format.
inline RewardBreakdown final_reward(const ParsedResponse& pr, const ItemBatch& batch,
                                    const RewardConfig& cfg) {
  cfg.validate();
  RewardBreakdown out;
  auto [per_item, reg_mean] = regression_reward(pr, batch, cfg.delta);
  out.per_item_reg = std::move(per_item);
  out.reg = reg_mean;
  const RankingTerms t = ranking_reward(pr, batch);
  out.len = t.len;
  out.consis = t.consis;
  out.acc = t.acc;
  out.rank = t.rank;
  out.format = format_reward(pr);
  out.final = cfg.lambda_reg * out.reg + cfg.lambda_rank * out.rank + cfg.lambda_format * out.format;
  return out;
}

}  // namespace rarl
