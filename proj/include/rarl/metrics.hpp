#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/errors.hpp"
#include "rarl/ordinal.hpp"
#include "rarl/policy.hpp"
#include "rarl/rng.hpp"
#include "rarl/tasks.hpp"

namespace rarl {

struct MetricsReport {
  double mae = 0.0;       // over single-item batches
  double accuracy = 0.0;  // exact match after rounding, single-item batches
  double srcc = 0.0;      // pooled single-item predictions vs truths
  bool srcc_degenerate = false;
  std::map<int, double> tau_by_n;  // mean Kendall tau per batch size N >= 2
  std::size_t num_eval_batches = 0;
  double format_ok_rate = 0.0;
};

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["mae"] = r.mae;
  j["accuracy"] = r.accuracy;
  j["srcc"] = r.srcc;
  j["srcc_degenerate"] = r.srcc_degenerate;
  nlohmann::json taus = nlohmann::json::object();
  for (const auto& [n, tau] : r.tau_by_n) taus[std::to_string(n)] = tau;
  j["tau_by_n"] = taus;
  j["num_eval_batches"] = r.num_eval_batches;
  j["format_ok_rate"] = r.format_ok_rate;
  return j;
}

// Runs the policy over an evaluation set and aggregates the benchmark
// quantities: MAE / accuracy / SRCC from single-item batches, mean Kendall
// tau per batch size for multi-item batches. Greedy decoding keeps reports
// deterministic; sampled decoding is available for diagnostics.
inline MetricsReport evaluate(const PolicyParams& policy, const std::vector<TaskBatch>& batches,
                              bool greedy = true, std::uint64_t sample_seed = 0) {
  if (batches.empty()) throw EmptyEvalSet("evaluate: no evaluation batches");
  policy.validate();

  MetricsReport report;
  report.num_eval_batches = batches.size();

  double mae_sum = 0.0;
  std::size_t exact = 0;
  std::size_t num_single = 0;
  std::vector<double> pooled_pred, pooled_truth;
  std::map<int, std::pair<double, std::size_t>> tau_acc;  // N -> (sum, count)
  std::size_t format_ok = 0;

  for (std::size_t b = 0; b < batches.size(); ++b) {
    const TaskBatch& tb = batches[b];
    const std::vector<int> ids = tb.batch.ids();
    ParsedResponse resp;
    if (greedy) {
      resp = greedy_response(policy, tb.features, ids).response;
    } else {
      Rng rng(mix_seed(sample_seed, 0xeva1u, b));
      resp = sample_response(policy, tb.features, ids, rng).response;
    }
    if (resp.format_ok) ++format_ok;

    const std::size_t n = tb.batch.size();
    if (n == 1) {
      ++num_single;
      const double truth = tb.batch.items[0].truth_value;
      double pred = 0.0;
      if (resp.format_ok && !resp.entries.empty()) pred = resp.entries[0].second;
      mae_sum += std::abs(pred - truth);
      if (std::llround(pred) == std::llround(truth)) ++exact;
      pooled_pred.push_back(pred);
      pooled_truth.push_back(truth);
    } else {
      double tau = -1.0;  // an unusable response counts as fully discordant
      if (resp.format_ok && resp.pred_perm.size() == n) {
        tau = kendall_tau(resp.pred_perm, tb.batch.truth_perm);
      }
      auto& [sum, count] = tau_acc[static_cast<int>(n)];
      sum += tau;
      ++count;
    }
  }

  report.format_ok_rate = static_cast<double>(format_ok) / static_cast<double>(batches.size());
  if (num_single > 0) {
    report.mae = mae_sum / static_cast<double>(num_single);
    report.accuracy = static_cast<double>(exact) / static_cast<double>(num_single);
    try {
      report.srcc = spearman_rho(pooled_pred, pooled_truth);
    } catch (const DegenerateInput&) {
      report.srcc = 0.0;
      report.srcc_degenerate = true;
    }
  } else {
    report.srcc_degenerate = true;
  }
  for (const auto& [n, acc] : tau_acc) {
    report.tau_by_n[n] = acc.first / static_cast<double>(acc.second);
  }
  return report;
}

}  // namespace rarl
