#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/errors.hpp"
#include "rarl/grpo.hpp"
#include "rarl/metrics.hpp"
#include "rarl/policy.hpp"
#include "rarl/reward.hpp"
#include "rarl/rng.hpp"
#include "rarl/tasks.hpp"

namespace rarl {

struct StageLambdas {
  double reg = 1.0;
  double rank = 1.0;
  double format = 1.0;
};

// Full description of one training run. The stock constructor carries
// desk-scale optimization defaults (learning rate, prompts per step) sized
// for the synthetic tasks; the large-model values from the reference
// setting remain plain config fields.
struct ExperimentConfig {
  TaskSpec task;
  double delta = family_delta(TaskFamily::age_like);
  StageLambdas stage1{1.0, 0.0, 1.0};  // regression + format only
  StageLambdas stage2{1.0, 1.0, 1.0};  // full objective
  GrpoConfig grpo;
  std::size_t num_bins = 21;
  double temperature = 1.0;
  std::size_t stage1_steps = 400;
  std::size_t stage2_steps = 800;
  std::size_t eval_every = 100;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  std::vector<std::size_t> eval_batch_sizes = {1, 2, 4};
  std::size_t eval_batches_per_n = 200;
  std::size_t log_responses_every = 100;  // 0 = never
  bool use_saddle_task = false;

  ExperimentConfig() {
    grpo.learning_rate = 0.05;
    grpo.batch_size = 16;
  }

  RewardConfig reward_for_stage(int stage) const {
    const StageLambdas& l = stage == 1 ? stage1 : stage2;
    return RewardConfig{delta, l.reg, l.rank, l.format};
  }

  void validate() const {
    task.validate();
    grpo.validate();
    if (!(delta > 0.0)) throw ConfigInvalid("ExperimentConfig: delta must be > 0");
    for (const StageLambdas& l : {stage1, stage2}) {
      if (l.reg < 0.0 || l.rank < 0.0 || l.format < 0.0) {
        throw ConfigInvalid("ExperimentConfig: lambdas must be >= 0");
      }
    }
    if (num_bins < 2) throw ConfigInvalid("ExperimentConfig: num_bins must be >= 2");
    if (!(temperature > 0.0)) throw ConfigInvalid("ExperimentConfig: temperature must be > 0");
    if (eval_every < 1) throw ConfigInvalid("ExperimentConfig: eval_every must be >= 1");
    if (eval_batch_sizes.empty()) {
      throw ConfigInvalid("ExperimentConfig: eval_batch_sizes must be non-empty");
    }
    if (eval_batches_per_n < 1) {
      throw ConfigInvalid("ExperimentConfig: eval_batches_per_n must be >= 1");
    }
    if (out_dir.empty()) throw ConfigInvalid("ExperimentConfig: out_dir must be non-empty");
  }
};

// --- config file io ---------------------------------------------------------

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec spec;
  spec.family = family_from_string(j.value("family", std::string("age_like")));
  spec.scale = family_scale(spec.family);
  if (j.contains("scale")) {
    spec.scale.num_ranks = j["scale"].value("num_ranks", spec.scale.num_ranks);
    spec.scale.value_lo = j["scale"].value("lo", spec.scale.value_lo);
    spec.scale.value_hi = j["scale"].value("hi", spec.scale.value_hi);
  }
  spec.feature_dim = j.value("feature_dim", spec.feature_dim);
  spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
  spec.batch_n = j.value("batch_n", spec.batch_n);
  spec.num_batches = j.value("num_batches", spec.num_batches);
  spec.seed = j.value("seed", spec.seed);
  spec.embed_seed = j.value("embed_seed", spec.embed_seed);
  return spec;
}

inline nlohmann::json task_spec_to_json(const TaskSpec& spec) {
  return nlohmann::json{
      {"family", family_name(spec.family)},
      {"scale",
       {{"num_ranks", spec.scale.num_ranks}, {"lo", spec.scale.value_lo}, {"hi", spec.scale.value_hi}}},
      {"feature_dim", spec.feature_dim},
      {"noise_sigma", spec.noise_sigma},
      {"batch_n", spec.batch_n},
      {"num_batches", spec.num_batches},
      {"seed", spec.seed},
      {"embed_seed", spec.embed_seed}};
}

inline void grpo_config_from_json(const nlohmann::json& j, GrpoConfig& g) {
  g.group_size = j.value("group_size", g.group_size);
  g.kl_coeff = j.value("kl_coeff", g.kl_coeff);
  g.learning_rate = j.value("learning_rate", g.learning_rate);
  g.batch_size = j.value("batch_size", g.batch_size);
  g.degenerate_eps = j.value("degenerate_eps", g.degenerate_eps);
  g.rmo_k = j.value("rmo_k", g.rmo_k);
  g.rmo_enabled = j.value("rmo_enabled", g.rmo_enabled);
  g.p_mut = j.value("p_mut", g.p_mut);
  g.p_mut_degenerate = j.value("p_mut_degenerate", g.p_mut_degenerate);
  g.kl_clamp = j.value("kl_clamp", g.kl_clamp);
  g.optimizer = j.value("optimizer", g.optimizer);
  g.weight_decay = j.value("weight_decay", g.weight_decay);
}

inline StageLambdas lambdas_from_json(const nlohmann::json& j, const StageLambdas& fallback) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigInvalid("lambdas must be an array [lambda_reg, lambda_rank, lambda_format]");
  }
  StageLambdas out = fallback;
  out.reg = j[0].get<double>();
  out.rank = j[1].get<double>();
  out.format = j[2].get<double>();
  return out;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("task")) cfg.task = task_spec_from_json(j["task"]);
  cfg.seed = j.value("seed", cfg.seed);
  if (cfg.task.seed == 0 || !j.contains("task") || !j["task"].contains("seed")) {
    cfg.task.seed = cfg.seed;
  }
  cfg.delta = j.value("delta", family_delta(cfg.task.family));
  if (j.contains("stage1_lambdas")) cfg.stage1 = lambdas_from_json(j["stage1_lambdas"], cfg.stage1);
  if (j.contains("stage2_lambdas")) cfg.stage2 = lambdas_from_json(j["stage2_lambdas"], cfg.stage2);
  if (j.contains("grpo")) grpo_config_from_json(j["grpo"], cfg.grpo);
  cfg.num_bins = j.value("num_bins", cfg.num_bins);
  cfg.temperature = j.value("temperature", cfg.temperature);
  cfg.stage1_steps = j.value("stage1_steps", cfg.stage1_steps);
  cfg.stage2_steps = j.value("stage2_steps", cfg.stage2_steps);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.eval_batch_sizes = j.value("eval_batch_sizes", cfg.eval_batch_sizes);
  cfg.eval_batches_per_n = j.value("eval_batches_per_n", cfg.eval_batches_per_n);
  cfg.log_responses_every = j.value("log_responses_every", cfg.log_responses_every);
  cfg.use_saddle_task = j.value("use_saddle_task", cfg.use_saddle_task);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_experiment_config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigInvalid("load_experiment_config: invalid JSON in " + path);
  return experiment_config_from_json(j);
}

// --- worker pool ------------------------------------------------------------

// RARL_THREADS caps rollout parallelism: unset/1 = serial, 0 = one thread
// per hardware core. Results land in preassigned slots and are reduced in
// fixed order, so the outputs are identical for every thread count.
inline std::size_t worker_threads(std::size_t jobs) {
  const char* env = std::getenv("RARL_THREADS");
  if (env == nullptr) return 1;
  const long parsed = std::strtol(env, nullptr, 10);
  std::size_t n = parsed <= 0 ? std::max(1u, std::thread::hardware_concurrency())
                              : static_cast<std::size_t>(parsed);
  return std::min(n, jobs == 0 ? std::size_t{1} : jobs);
}

template <typename Fn>
inline void parallel_for(std::size_t jobs, Fn&& fn) {
  const std::size_t threads = worker_threads(jobs);
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs) break;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

// --- run_experiment ---------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return std::string(buf);
}

inline nlohmann::json response_record(const std::string& batch_id, const ParsedResponse& pr,
                                      const RewardBreakdown& bd) {
  nlohmann::json j;
  j["batch_id"] = batch_id;
  j["raw_text"] = pr.raw_text;
  j["reg"] = bd.reg;
  j["len"] = bd.len;
  j["consis"] = bd.consis;
  j["acc"] = bd.acc;
  j["rank"] = bd.rank;
  j["format"] = bd.format;
  j["final"] = bd.final;
  return j;
}

}  // namespace detail

// Two-stage RARL schedule: stage 1 trains with regression + format rewards
// and no mutation; stage 2 switches to the full objective and activates
// RMO. Writes curve.csv, responses.jsonl, report.json and checkpoints under
// cfg.out_dir and returns the final evaluation report. Fully reproducible
// per (config, seed).
inline MetricsReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  PolicyParams policy =
      make_policy(cfg.task.scale, cfg.num_bins, cfg.temperature, cfg.task.feature_dim);
  const PolicyParams ref = policy;

  const RewardConfig reward_stage1 = cfg.reward_for_stage(1);
  const RewardConfig reward_stage2 = cfg.reward_for_stage(2);

  const std::vector<TaskBatch> train =
      cfg.use_saddle_task ? saddle_task(cfg.task, policy, reward_stage2, cfg.grpo.group_size,
                                        cfg.grpo.degenerate_eps)
                          : generate(cfg.task);
  if (train.empty()) throw ConfigInvalid("run_experiment: task generated no batches");

  std::vector<TaskBatch> eval_set;
  for (std::size_t n : cfg.eval_batch_sizes) {
    TaskSpec es = cfg.task;
    es.batch_n = n;
    es.num_batches = cfg.eval_batches_per_n;
    es.embed_seed = cfg.task.effective_embed_seed();
    es.seed = mix_seed(cfg.task.seed, 0xeeedu, n);
    const std::vector<TaskBatch> part = generate(es);
    eval_set.insert(eval_set.end(), part.begin(), part.end());
  }

  std::ofstream curve(cfg.out_dir + "/curve.csv");
  if (!curve) throw IoError("run_experiment: cannot write " + cfg.out_dir + "/curve.csv");
  curve << "step,mean_reward,mean_abs_adv,grad_norm,kl,mutations,stage,l1,l2,l3";
  std::vector<int> tau_columns;
  curve << ",mae,accuracy,srcc";
  for (std::size_t n : cfg.eval_batch_sizes) {
    if (n >= 2) {
      tau_columns.push_back(static_cast<int>(n));
      curve << ",tau_" << n;
    }
  }
  curve << ",format_ok_rate\n";

  std::ofstream rlog(cfg.out_dir + "/responses.jsonl");
  if (!rlog) throw IoError("run_experiment: cannot write " + cfg.out_dir + "/responses.jsonl");

  AdamState opt;
  MetricsReport last_report;
  const std::size_t total_steps = cfg.stage1_steps + cfg.stage2_steps;

  for (std::size_t step = 0; step < total_steps; ++step) {
    const int stage = step < cfg.stage1_steps ? 1 : 2;
    const RewardConfig& rc = stage == 1 ? reward_stage1 : reward_stage2;
    const StageLambdas& lam = stage == 1 ? cfg.stage1 : cfg.stage2;
    const bool rmo_active = stage == 2 && cfg.grpo.rmo_enabled;

    std::vector<GroupRollout> rollouts(cfg.grpo.batch_size);
    parallel_for(cfg.grpo.batch_size, [&](std::size_t j) {
      const TaskBatch& tb = train[(step * cfg.grpo.batch_size + j) % train.size()];
      Rng rng(mix_seed(cfg.seed, step, j));
      GroupRollout rollout;
      rollout.batch = &tb.batch;
      rollout.features = &tb.features;
      rollout.group.batch_id = tb.batch.batch_id;
      const std::vector<int> ids = tb.batch.ids();
      for (std::size_t g = 0; g < cfg.grpo.group_size; ++g) {
        SampleResult s = sample_response(policy, tb.features, ids, rng);
        rollout.group.rewards.push_back(final_reward(s.response, tb.batch, rc).final);
        rollout.group.responses.push_back(std::move(s.response));
        rollout.actions.push_back(std::move(s.action));
      }
      rollout.group.mutated.assign(cfg.grpo.group_size, false);
      rollout.group.advantages = group_advantages(rollout.group.rewards, cfg.grpo.degenerate_eps);
      if (rmo_active) {
        ResponseGroup mutated = apply_rmo(rollout.group, tb.batch, cfg.grpo, rc, rng);
        for (std::size_t i = 0; i < mutated.size(); ++i) {
          if (mutated.mutated[i]) {
            rollout.actions[i] = canonical_truth_response(policy, tb.batch).action;
          }
        }
        rollout.group = std::move(mutated);
      }
      rollouts[j] = std::move(rollout);
    });

    StepStats stats = grpo_step(policy, ref, rollouts, cfg.grpo, opt);
    stats.stage = stage;

    if (cfg.log_responses_every > 0 && step % cfg.log_responses_every == 0) {
      for (const auto& rollout : rollouts) {
        for (std::size_t i = 0; i < rollout.group.size(); ++i) {
          const RewardBreakdown bd =
              final_reward(rollout.group.responses[i], *rollout.batch, rc);
          nlohmann::json rec =
              detail::response_record(rollout.group.batch_id, rollout.group.responses[i], bd);
          rec["step"] = step;
          rec["mutated"] = static_cast<bool>(rollout.group.mutated[i]);
          rlog << rec.dump() << "\n";
        }
      }
    }

    const bool do_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == total_steps;
    curve << step << ',' << detail::fmt_double(stats.mean_reward) << ','
          << detail::fmt_double(stats.mean_abs_adv) << ',' << detail::fmt_double(stats.grad_norm)
          << ',' << detail::fmt_double(stats.kl) << ',' << stats.mutations << ',' << stats.stage
          << ',' << detail::fmt_double(lam.reg) << ',' << detail::fmt_double(lam.rank) << ','
          << detail::fmt_double(lam.format);
    if (do_eval) {
      last_report = evaluate(policy, eval_set);
      curve << ',' << detail::fmt_double(last_report.mae) << ','
            << detail::fmt_double(last_report.accuracy) << ','
            << detail::fmt_double(last_report.srcc);
      for (int n : tau_columns) {
        auto it = last_report.tau_by_n.find(n);
        curve << ',' << (it == last_report.tau_by_n.end() ? "" : detail::fmt_double(it->second));
      }
      curve << ',' << detail::fmt_double(last_report.format_ok_rate);
    } else {
      curve << ",,,";
      for (std::size_t i = 0; i < tau_columns.size(); ++i) curve << ',';
      curve << ',';
    }
    curve << "\n";

    if (step + 1 == cfg.stage1_steps && cfg.stage2_steps > 0) {
      save_checkpoint(policy, cfg.out_dir + "/ckpt-stage1.bin");
    }
  }

  last_report = evaluate(policy, eval_set);
  save_checkpoint(policy, cfg.out_dir + "/ckpt-final.bin");
  std::ofstream report_out(cfg.out_dir + "/report.json");
  if (!report_out) throw IoError("run_experiment: cannot write report.json");
  report_out << report_to_json(last_report).dump(2) << "\n";
  return last_report;
}

// --- offline scoring --------------------------------------------------------

struct ScoreSummary {
  std::size_t lines = 0;
  std::size_t scored = 0;
  std::size_t errors = 0;
  double mean_reg = 0.0;
  double mean_len = 0.0;
  double mean_consis = 0.0;
  double mean_acc = 0.0;
  double mean_rank = 0.0;
  double mean_format = 0.0;
  double mean_final = 0.0;
};

inline nlohmann::json summary_to_json(const ScoreSummary& s) {
  return nlohmann::json{{"lines", s.lines},         {"scored", s.scored},
                        {"errors", s.errors},       {"mean_reg", s.mean_reg},
                        {"mean_len", s.mean_len},   {"mean_consis", s.mean_consis},
                        {"mean_acc", s.mean_acc},   {"mean_rank", s.mean_rank},
                        {"mean_format", s.mean_format}, {"mean_final", s.mean_final}};
}

// Re-scores a JSONL response log against its batches. Output mirrors the
// input line for line; malformed records become zero-reward lines with a
// diagnostic instead of aborting the run.
inline ScoreSummary score_file(const std::string& responses_path, const std::string& batches_path,
                               const RewardConfig& reward_cfg, std::ostream& out) {
  reward_cfg.validate();
  const std::vector<TaskBatch> batches = load_batches(batches_path);
  std::map<std::string, const ItemBatch*> by_id;
  for (const auto& tb : batches) by_id[tb.batch.batch_id] = &tb.batch;

  std::ifstream in(responses_path);
  if (!in) throw IoError("score_file: cannot open " + responses_path);

  ScoreSummary summary;
  std::string line;
  while (std::getline(in, line)) {
    ++summary.lines;
    nlohmann::json rec;
    RewardBreakdown bd;
    std::string error;
    std::string batch_id;
    std::string raw_text;

    const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      error = "unparseable record";
    } else {
      batch_id = j.value("batch_id", std::string());
      raw_text = j.value("raw_text", std::string());
      if (batch_id.empty() || !j.contains("raw_text")) {
        error = "record missing batch_id or raw_text";
      } else {
        auto it = by_id.find(batch_id);
        if (it == by_id.end()) {
          error = "unknown batch_id " + batch_id;
        } else {
          const std::vector<int> ids = it->second->ids();
          const ParsedResponse pr = parse_response(raw_text, std::set<int>(ids.begin(), ids.end()));
          bd = final_reward(pr, *it->second, reward_cfg);
          ++summary.scored;
          if (!pr.format_ok && pr.parse_error) error = *pr.parse_error;
        }
      }
    }
    if (!error.empty() && summary.scored + summary.errors < summary.lines) ++summary.errors;

    rec["batch_id"] = batch_id;
    rec["raw_text"] = raw_text;
    rec["reg"] = bd.reg;
    rec["len"] = bd.len;
    rec["consis"] = bd.consis;
    rec["acc"] = bd.acc;
    rec["rank"] = bd.rank;
    rec["format"] = bd.format;
    rec["final"] = bd.final;
    if (!error.empty()) rec["error"] = error;
    out << rec.dump() << "\n";

    summary.mean_reg += bd.reg;
    summary.mean_len += bd.len;
    summary.mean_consis += bd.consis;
    summary.mean_acc += bd.acc;
    summary.mean_rank += bd.rank;
    summary.mean_format += bd.format;
    summary.mean_final += bd.final;
  }
  if (summary.lines > 0) {
    const double n = static_cast<double>(summary.lines);
    summary.mean_reg /= n;
    summary.mean_len /= n;
    summary.mean_consis /= n;
    summary.mean_acc /= n;
    summary.mean_rank /= n;
    summary.mean_format /= n;
    summary.mean_final /= n;
  }
  return summary;
}

}  // namespace rarl
