#pragma once

#include <algorithm>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "eclab/agents.hpp"
#include "eclab/gridworld.hpp"
#include "eclab/params.hpp"
#include "eclab/rng.hpp"
#include "eclab/tensor.hpp"

namespace eclab {

enum class SpeakerKind { PG, PGLowEnt, PGFixed, CCO, NoTrainCCO, FixedRand };

inline const char* speaker_kind_name(SpeakerKind k) {
  static const char* names[] = {"pg", "pglowent", "pgfixed", "cco", "notraincco", "fixedrand"};
  return names[static_cast<int>(k)];
}

struct TrainConfig {
  EnvConfig env;
  int num_envs = 10;
  long long total_steps = 10'000'000;
  int update_every = 5;
  double lr_speaker = 4e-4;
  double lr_listener = 1e-3;
  double discount = 0.99;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int vocab_size = 15;
  int max_len = 20;
  SpeakerKind speaker_kind = SpeakerKind::CCO;
  EncoderMode encoder_mode = EncoderMode::Gru;
  std::uint64_t seed = 1;
  bool freeze_listener_world = false;

  long long eval_interval = 50'000;
  long long checkpoint_interval = 0;  // 0: final checkpoint only
  int eval_worlds = 500;
  double stop_at_success = -1.0;  // early stop on eval success; negative disables

  long long pretrain_steps = 2'000'000;
  double pretrain_threshold = 0.95;
  long long pretrain_eval_interval = 25'000;

  void validate() const {
    env.validate();
    if (num_envs < 1) throw ConfigError("num_envs must be positive");
    if (update_every < 1) throw ConfigError("update_every must be positive");
    if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
    if (max_len < 1) throw ConfigError("max_len must be positive");
    if (total_steps < 0) throw ConfigError("total_steps must be nonnegative");
    if (eval_interval < 1) throw ConfigError("eval_interval must be positive");
    if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must be in (0,1]");
  }

  double speaker_temperature() const { return speaker_kind == SpeakerKind::PGLowEnt ? 0.3 : 1.0; }
};

struct EpisodeRecord {
  Task task;
  Utterance utterance;
  std::vector<Action> actions;
  std::vector<double> listener_rewards;
  double speaker_return = 0.0;
  bool success = false;
  std::uint64_t world_seed = 0;
  bool ended_with_end = false;
};

// ---------------------------------------------------------------------------
// fixed / random reference speakers
// ---------------------------------------------------------------------------

struct FixedLanguage {
  std::vector<std::pair<Task, Utterance>> entries;

  const Utterance& lookup(const Task& t) const {
    for (const auto& [task, utt] : entries)
      if (task == t) return utt;
    throw ValueError("task not covered by the fixed language");
  }
};

inline Utterance random_utterance(int vocab_size, int max_len, Rng& rng) {
  Utterance u;
  const int len = rng.next_int(1, max_len);
  for (int i = 0; i < len; ++i) u.symbols.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab_size))));
  return u;
}

// One fixed, globally unique random utterance per task in the configured
// cross product.
inline FixedLanguage make_fixedrand_speaker(const EnvConfig& env, int vocab_size, int max_len, Rng& rng) {
  const auto tasks = env.all_tasks();
  // distinct utterances of length <= max_len, saturated
  double capacity = 0.0;
  for (int l = 1; l <= max_len && capacity < 1e18; ++l) capacity += std::pow(static_cast<double>(vocab_size), l);
  if (capacity < static_cast<double>(tasks.size()))
    throw ConfigError("task space larger than the number of distinct utterances");
  FixedLanguage lang;
  std::vector<Utterance> used;
  for (const Task& t : tasks) {
    for (;;) {
      Utterance u = random_utterance(vocab_size, max_len, rng);
      if (std::find(used.begin(), used.end(), u) == used.end()) {
        used.push_back(u);
        lang.entries.emplace_back(t, std::move(u));
        break;
      }
    }
  }
  return lang;
}

// ---------------------------------------------------------------------------
// speaker dispatch
// ---------------------------------------------------------------------------

struct SpeakerHandle {
  SpeakerKind kind = SpeakerKind::CCO;
  SpeakerPGNet* pg = nullptr;
  SpeakerCCONet* cco = nullptr;
  const FixedLanguage* fixed = nullptr;
  double temperature = 1.0;

  struct Spoken {
    Utterance utt;
    bool ended_with_end = false;
  };

  Spoken speak(const Tensor& w0_img, const Tensor& goal_img, const Task& task, bool greedy, Rng* rng) const {
    switch (kind) {
      case SpeakerKind::PG:
      case SpeakerKind::PGLowEnt:
      case SpeakerKind::PGFixed: {
        PgDecodeResult r = speaker_pg_decode(*pg, w0_img, goal_img, greedy, temperature, rng);
        return {std::move(r.utt), r.ended_with_end};
      }
      case SpeakerKind::CCO:
      case SpeakerKind::NoTrainCCO:
        return {cco_decode(*cco, w0_img, goal_img), true};
      case SpeakerKind::FixedRand:
        return {fixed->lookup(task), true};
    }
    throw ValueError("unknown speaker kind");
  }
};

// ---------------------------------------------------------------------------
// listener A2C update
// ---------------------------------------------------------------------------

struct Transition {
  Tensor world_img, inv_img;
  long long episode_serial = 0;  // transitions of one episode share the utterance rep
  Utterance utt;
  int action = 0;
  double reward = 0.0;
  bool done = false;
};

struct ListenerLosses {
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
};

// n-step returns with bootstrap at the fragment cut, policy gradient with
// the advantage held constant, L2 value loss, entropy bonus; one rmsprop
// step per call.
inline ListenerLosses a2c_listener_update(ListenerNet& net, Rmsprop& opt,
                                          const std::vector<std::vector<Transition>>& fragments,
                                          const std::vector<double>& bootstrap_values, const TrainConfig& cfg) {
  int total_n = 0;
  for (const auto& frag : fragments) total_n += static_cast<int>(frag.size());
  if (total_n == 0) return {};

  Tape tape;
  TapeScope scope(tape);
  Tensor policy_sum = Tensor::scalar(0.0);
  Tensor value_sum = Tensor::scalar(0.0);
  Tensor entropy_sum = Tensor::scalar(0.0);
  ListenerLosses out;

  for (std::size_t e = 0; e < fragments.size(); ++e) {
    const auto& frag = fragments[e];
    if (frag.empty()) continue;
    // n-step targets, masked at episode boundaries
    std::vector<double> target(frag.size());
    double g = frag.back().done ? 0.0 : bootstrap_values[e];
    for (int t = static_cast<int>(frag.size()) - 1; t >= 0; --t) {
      g = frag[static_cast<std::size_t>(t)].reward + cfg.discount * (frag[static_cast<std::size_t>(t)].done ? 0.0 : g);
      target[static_cast<std::size_t>(t)] = g;
      if (t > 0 && frag[static_cast<std::size_t>(t - 1)].done) g = 0.0;
    }
    std::map<long long, Tensor> reps;
    for (std::size_t t = 0; t < frag.size(); ++t) {
      const Transition& tr = frag[t];
      auto it = reps.find(tr.episode_serial);
      if (it == reps.end()) it = reps.emplace(tr.episode_serial, utterance_rep(net.utt, tr.utt)).first;
      PolicyValue pv = listener_forward_cached(net, tr.world_img, tr.inv_img, it->second);
      Tensor logp = log_softmax(pv.logits);
      Tensor lp = pick(logp, tr.action);
      const double advantage = target[t] - pv.value.item();
      policy_sum = add(policy_sum, scale(lp, -advantage));
      Tensor diff = add_scalar(scale(reshape(pv.value, {1}), -1.0), target[t]);
      value_sum = add(value_sum, mul(diff, diff));
      Tensor ent = scale(sum(mul(exp_op(logp), logp)), -1.0);
      entropy_sum = add(entropy_sum, ent);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(total_n);
  Tensor loss = add(scale(policy_sum, inv_n),
                    add(scale(value_sum, cfg.value_coef * inv_n), scale(entropy_sum, -cfg.entropy_coef * inv_n)));
  out.policy = policy_sum.item() * inv_n;
  out.value = value_sum.item() * inv_n;
  out.entropy = entropy_sum.item() * inv_n;
  backward(loss);
  opt.step(net.params);
  net.params.zero_grads();
  return out;
}

// Same update for the single-agent (pre-training) network, goal image in
// place of the utterance.
struct SingleTransition {
  Tensor world_img, inv_img, goal_img;
  int action = 0;
  double reward = 0.0;
  bool done = false;
};

inline ListenerLosses a2c_single_agent_update(SingleAgentNet& net, Rmsprop& opt,
                                              const std::vector<std::vector<SingleTransition>>& fragments,
                                              const std::vector<double>& bootstrap_values, const TrainConfig& cfg) {
  int total_n = 0;
  for (const auto& frag : fragments) total_n += static_cast<int>(frag.size());
  if (total_n == 0) return {};

  Tape tape;
  TapeScope scope(tape);
  Tensor policy_sum = Tensor::scalar(0.0);
  Tensor value_sum = Tensor::scalar(0.0);
  Tensor entropy_sum = Tensor::scalar(0.0);
  ListenerLosses out;

  for (std::size_t e = 0; e < fragments.size(); ++e) {
    const auto& frag = fragments[e];
    if (frag.empty()) continue;
    std::vector<double> target(frag.size());
    double g = frag.back().done ? 0.0 : bootstrap_values[e];
    for (int t = static_cast<int>(frag.size()) - 1; t >= 0; --t) {
      g = frag[static_cast<std::size_t>(t)].reward + cfg.discount * (frag[static_cast<std::size_t>(t)].done ? 0.0 : g);
      target[static_cast<std::size_t>(t)] = g;
      if (t > 0 && frag[static_cast<std::size_t>(t - 1)].done) g = 0.0;
    }
    for (std::size_t t = 0; t < frag.size(); ++t) {
      const SingleTransition& tr = frag[t];
      PolicyValue pv = single_agent_forward(net, tr.world_img, tr.inv_img, tr.goal_img);
      Tensor logp = log_softmax(pv.logits);
      Tensor lp = pick(logp, tr.action);
      const double advantage = target[t] - pv.value.item();
      policy_sum = add(policy_sum, scale(lp, -advantage));
      Tensor diff = add_scalar(scale(reshape(pv.value, {1}), -1.0), target[t]);
      value_sum = add(value_sum, mul(diff, diff));
      entropy_sum = add(entropy_sum, scale(sum(mul(exp_op(logp), logp)), -1.0));
    }
  }

  const double inv_n = 1.0 / static_cast<double>(total_n);
  Tensor loss = add(scale(policy_sum, inv_n),
                    add(scale(value_sum, cfg.value_coef * inv_n), scale(entropy_sum, -cfg.entropy_coef * inv_n)));
  out.policy = policy_sum.item() * inv_n;
  out.value = value_sum.item() * inv_n;
  out.entropy = entropy_sum.item() * inv_n;
  backward(loss);
  opt.step(net.params);
  net.params.zero_grads();
  return out;
}

// ---------------------------------------------------------------------------
// speaker updates
// ---------------------------------------------------------------------------

// Regenerate the initial observation pair for an episode from its seed.
inline std::pair<Tensor, Tensor> episode_images(const EpisodeRecord& ep, const EnvConfig& env) {
  Rng wr(ep.world_seed);
  WorldState w0 = generate_world(wr, ep.task, env);
  return {render_world(w0), render_goal(ep.task)};
}

// REINFORCE with the critic baseline over the utterance token log-probs.
inline double pg_speaker_update(SpeakerPGNet& net, Rmsprop& opt, const std::vector<EpisodeRecord>& episodes,
                                const TrainConfig& cfg) {
  if (episodes.empty()) return 0.0;
  Tape tape;
  TapeScope scope(tape);
  Tensor total = Tensor::scalar(0.0);
  for (const EpisodeRecord& ep : episodes) {
    auto [w0_img, goal_img] = episode_images(ep, cfg.env);
    Tensor h_g = net.hidden_for(w0_img, goal_img);
    Tensor v_s = net.value_for(h_g);
    const double advantage = ep.speaker_return - v_s.item();
    std::vector<Tensor> lps = speaker_pg_log_probs(net, h_g, ep.utterance, ep.ended_with_end, cfg.speaker_temperature());
    Tensor lp_sum = Tensor::scalar(0.0);
    for (const Tensor& lp : lps) lp_sum = add(lp_sum, lp);
    Tensor diff = add_scalar(scale(reshape(v_s, {1}), -1.0), ep.speaker_return);
    Tensor ep_loss = add(scale(lp_sum, -advantage), scale(mul(diff, diff), cfg.value_coef));
    total = add(total, ep_loss);
  }
  Tensor loss = scale(total, 1.0 / static_cast<double>(episodes.size()));
  const double value = loss.item();
  backward(loss);
  opt.step(net.params);
  net.params.zero_grads();
  return value;
}

// Prefix objective with advantage gating plus the critic L2 term; only the
// utterance pathway and critic head receive updates (the world/goal pathway
// is frozen).
inline double cco_speaker_update(SpeakerCCONet& net, Rmsprop& opt, const std::vector<EpisodeRecord>& episodes,
                                 const TrainConfig& cfg) {
  if (episodes.empty()) return 0.0;
  Tape tape;
  TapeScope scope(tape);
  Tensor total = Tensor::scalar(0.0);
  for (const EpisodeRecord& ep : episodes) {
    auto [w0_img, goal_img] = episode_images(ep, cfg.env);
    Tensor h_g;
    {
      Tape* saved = detail::tls_tape();
      detail::tls_tape() = nullptr;
      h_g = net.h_goal(w0_img, goal_img);
      detail::tls_tape() = saved;
    }
    Tensor v_s = affine(h_g, net.vs_w, net.vs_b);
    const double advantage = ep.speaker_return - v_s.item();
    Tensor obj = cco_speaker_objective(net, w0_img, goal_img, ep.utterance, advantage);
    Tensor diff = add_scalar(scale(reshape(v_s, {1}), -1.0), ep.speaker_return);
    total = add(total, add(obj, mul(diff, diff)));
  }
  Tensor loss = scale(total, 1.0 / static_cast<double>(episodes.size()));
  const double value = loss.item();
  backward(loss);
  opt.step(net.params);
  net.params.zero_grads();
  return value;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kEvalSeedBit = 1ull << 63;  // world-seed ranges: train clear, eval set

struct EvalResult {
  double success_rate = 0.0;
  int worlds = 0;
  double mean_utterance_len = 0.0;
  double mean_steps = 0.0;
  // (mission, color, count) -> successes / trials
  std::map<std::tuple<int, int, int>, std::pair<int, int>> per_task;
};

inline int argmax_action(const Tensor& logits) {
  int best = 0;
  for (int j = 1; j < kNumActions; ++j)
    if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(best)]) best = j;
  return best;
}

// Greedy rollout of one two-agent episode; returns the terminal status.
inline Status play_episode(const SpeakerHandle& speaker, const ListenerNet& listener, const Task& task,
                           std::uint64_t world_seed, const EnvConfig& env, Utterance* utt_out = nullptr,
                           int* steps_out = nullptr, Rng* sample_rng = nullptr) {
  Rng wr(world_seed);
  WorldState state = generate_world(wr, task, env);
  Tensor w0 = render_world(state);
  Tensor goal = render_goal(task);
  auto spoken = speaker.speak(w0, goal, task, /*greedy=*/sample_rng == nullptr, sample_rng);
  if (utt_out) *utt_out = spoken.utt;
  Tensor rep = utterance_rep(listener.utt, spoken.utt);
  while (state.status == Status::Ongoing) {
    Tensor world_img = render_world(state);
    Tensor inv_img = render_inventory(state);
    PolicyValue pv = listener_forward_cached(listener, world_img, inv_img, rep);
    int action;
    if (sample_rng) {
      Tensor probs = softmax(pv.logits);
      double u = sample_rng->next_double(), acc = 0.0;
      action = kNumActions - 1;
      for (int j = 0; j < kNumActions; ++j) {
        acc += probs[static_cast<std::size_t>(j)];
        if (u < acc) {
          action = j;
          break;
        }
      }
    } else {
      action = argmax_action(pv.logits);
    }
    auto [next, outcome] = step(state, static_cast<Action>(action), env);
    state = next;
  }
  if (steps_out) *steps_out = state.steps_taken;
  return state.status;
}

// Success rate over held-out worlds, greedy acting for both agents.
inline EvalResult evaluate(const SpeakerHandle& speaker, const ListenerNet& listener, const TrainConfig& cfg,
                           int num_worlds, Rng eval_rng) {
  EvalResult res;
  res.worlds = num_worlds;
  double len_sum = 0.0, step_sum = 0.0;
  int successes = 0;
  for (int i = 0; i < num_worlds; ++i) {
    Task task = sample_task(eval_rng, cfg.env);
    const std::uint64_t ws = eval_rng.next_u64() | kEvalSeedBit;
    Utterance utt;
    int steps = 0;
    Status st = play_episode(speaker, listener, task, ws, cfg.env, &utt, &steps);
    const bool ok = st == Status::Success;
    successes += ok;
    len_sum += utt.length();
    step_sum += steps;
    auto& cell = res.per_task[{static_cast<int>(task.mission), task.color, task.count}];
    cell.first += ok;
    cell.second += 1;
  }
  res.success_rate = static_cast<double>(successes) / static_cast<double>(num_worlds);
  res.mean_utterance_len = len_sum / static_cast<double>(num_worlds);
  res.mean_steps = step_sum / static_cast<double>(num_worlds);
  return res;
}

// Single-agent greedy evaluation (pre-training progress).
inline double evaluate_single_agent(const SingleAgentNet& net, const TrainConfig& cfg, int num_worlds, Rng eval_rng) {
  int successes = 0;
  for (int i = 0; i < num_worlds; ++i) {
    Task task = sample_task(eval_rng, cfg.env);
    Rng wr(eval_rng.next_u64() | kEvalSeedBit);
    WorldState state = generate_world(wr, task, cfg.env);
    Tensor goal = render_goal(task);
    while (state.status == Status::Ongoing) {
      PolicyValue pv = single_agent_forward(net, render_world(state), render_inventory(state), goal);
      auto [next, outcome] = step(state, static_cast<Action>(argmax_action(pv.logits)), cfg.env);
      state = next;
    }
    successes += state.status == Status::Success;
  }
  return static_cast<double>(successes) / static_cast<double>(num_worlds);
}

// ---------------------------------------------------------------------------
// pre-training (single-agent setting)
// ---------------------------------------------------------------------------

struct PretrainResult {
  SingleAgentNet net;
  bool reached_threshold = false;
  long long steps_used = 0;
  double best_success = 0.0;
};

inline PretrainResult pretrain_single_agent(const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  Rng master(cfg.seed);
  PretrainResult result;
  result.net = SingleAgentNet::make(master.substream("pretrain_net"));
  SingleAgentNet& net = result.net;
  Rmsprop opt(net.params, {cfg.lr_listener, 0.99, 1e-5});

  struct Slot {
    Rng rng;
    WorldState state;
    Task task;
    Tensor goal_img, world_img, inv_img;
    Slot() : rng(0) {}
  };
  std::vector<Slot> envs;
  for (int i = 0; i < cfg.num_envs; ++i) {
    Slot s;
    s.rng = master.substream("pretrain_env", static_cast<std::uint64_t>(i));
    envs.push_back(std::move(s));
  }
  auto reset_slot = [&](Slot& s) {
    s.task = sample_task(s.rng, cfg.env);
    Rng wr(s.rng.next_u64() & ~kEvalSeedBit);
    s.state = generate_world(wr, s.task, cfg.env);
    s.goal_img = render_goal(s.task);
    s.world_img = render_world(s.state);
    s.inv_img = render_inventory(s.state);
  };
  for (auto& s : envs) reset_slot(s);

  std::vector<std::vector<SingleTransition>> fragments(static_cast<std::size_t>(cfg.num_envs));
  std::vector<std::pair<std::string, Tensor>> best_params;
  long long steps = 0, iter = 0, next_eval = cfg.pretrain_eval_interval;
  if (log) *log << "step,eval_success\n";
  while (steps < cfg.pretrain_steps) {
    for (int i = 0; i < cfg.num_envs; ++i) {
      Slot& s = envs[static_cast<std::size_t>(i)];
      PolicyValue pv = single_agent_forward(net, s.world_img, s.inv_img, s.goal_img);
      Tensor probs = softmax(pv.logits);
      double u = s.rng.next_double(), acc = 0.0;
      int action = kNumActions - 1;
      for (int j = 0; j < kNumActions; ++j) {
        acc += probs[static_cast<std::size_t>(j)];
        if (u < acc) {
          action = j;
          break;
        }
      }
      auto [next, outcome] = step(s.state, static_cast<Action>(action), cfg.env);
      fragments[static_cast<std::size_t>(i)].push_back(
          {s.world_img, s.inv_img, s.goal_img, action, outcome.reward, outcome.status != Status::Ongoing});
      s.state = next;
      if (next.status != Status::Ongoing) {
        reset_slot(s);
      } else {
        s.world_img = render_world(s.state);
        s.inv_img = render_inventory(s.state);
      }
      ++steps;
    }
    ++iter;
    if (iter % cfg.update_every == 0) {
      std::vector<double> bootstrap(static_cast<std::size_t>(cfg.num_envs), 0.0);
      for (int i = 0; i < cfg.num_envs; ++i) {
        const auto& frag = fragments[static_cast<std::size_t>(i)];
        if (!frag.empty() && !frag.back().done) {
          Slot& s = envs[static_cast<std::size_t>(i)];
          bootstrap[static_cast<std::size_t>(i)] =
              single_agent_forward(net, s.world_img, s.inv_img, s.goal_img).value.item();
        }
      }
      a2c_single_agent_update(net, opt, fragments, bootstrap, cfg);
      for (auto& f : fragments) f.clear();

      if (steps >= next_eval) {
        next_eval += cfg.pretrain_eval_interval;
        const double success = evaluate_single_agent(net, cfg, 200, master.substream("pretrain_eval"));
        if (log) *log << steps << "," << success << "\n";
        if (success > result.best_success) {
          result.best_success = success;
          best_params.clear();
          for (const auto& [name, t] : net.params.items()) {
            Tensor copy = Tensor::zeros(t.shape());
            for (std::size_t k = 0; k < t.numel(); ++k) copy[k] = t[k];
            best_params.emplace_back(name, copy);
          }
        }
        if (success >= cfg.pretrain_threshold) {
          result.reached_threshold = true;
          break;
        }
      }
    }
  }
  result.steps_used = steps;
  if (!result.reached_threshold && !best_params.empty()) apply_checkpoint(net.params, best_params);
  return result;
}

// ---------------------------------------------------------------------------
// the synchronous co-training loop
// ---------------------------------------------------------------------------

struct LogRow {
  long long step = 0;
  long long episodes = 0;
  double train_success_ma = 0.0;
  double eval_success = 0.0;
  double speaker_loss = 0.0;
  double listener_policy_loss = 0.0;
  double listener_value_loss = 0.0;
  double mean_utterance_len = 0.0;

  std::string csv() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", step, episodes, train_success_ma,
                  eval_success, speaker_loss, listener_policy_loss, listener_value_loss, mean_utterance_len);
    return buf;
  }
  static const char* csv_header() {
    return "step,episodes,train_success_ma,eval_success,speaker_loss,listener_policy_loss,listener_value_loss,"
           "mean_utterance_len";
  }
};

struct TrainResult {
  std::vector<LogRow> rows;
  double final_eval = 0.0;
  long long steps_done = 0;
  bool early_stopped = false;
};

inline constexpr char kRunStateMagic[] = "ECLRS";
inline constexpr std::uint32_t kRunStateVersion = 1;

// Owns both agents, the parallel environments and all counters; can snapshot
// its complete state to disk and restore it, reproducing the remaining run
// exactly.
class TrainingSession {
 public:
  explicit TrainingSession(const TrainConfig& cfg,
                           const std::vector<std::pair<std::string, Tensor>>* pretrained = nullptr)
      : cfg_(cfg), master_(cfg.seed) {
    cfg_.validate();
    build_nets();
    if (pretrained) {
      apply_checkpoint(listener_.params, *pretrained);
      if (pg_) {
        apply_checkpoint(pg_->params, *pretrained);
        alias_critic(pg_->params, *pretrained);
      }
      if (cco_) {
        apply_checkpoint(cco_->params, *pretrained);
        alias_critic(cco_->params, *pretrained);
      }
    }
    apply_freezing();
    envs_.resize(static_cast<std::size_t>(cfg_.num_envs));
    for (int i = 0; i < cfg_.num_envs; ++i) {
      envs_[static_cast<std::size_t>(i)].rng = master_.substream("env", static_cast<std::uint64_t>(i));
      reset_env(envs_[static_cast<std::size_t>(i)]);
    }
    fragments_.resize(static_cast<std::size_t>(cfg_.num_envs));
    next_eval_mark_ = 0;
    next_ckpt_mark_ = cfg_.checkpoint_interval > 0 ? cfg_.checkpoint_interval : -1;
  }

  const TrainConfig& config() const { return cfg_; }
  ListenerNet& listener() { return listener_; }
  SpeakerPGNet* pg_speaker() { return pg_.get(); }
  SpeakerCCONet* cco_speaker() { return cco_.get(); }
  const FixedLanguage* fixed_language() const { return fixed_ ? fixed_.get() : nullptr; }
  long long steps_done() const { return steps_done_; }

  SpeakerHandle speaker_handle() const {
    SpeakerHandle h;
    h.kind = cfg_.speaker_kind;
    h.pg = pg_.get();
    h.cco = cco_.get();
    h.fixed = fixed_.get();
    h.temperature = cfg_.speaker_temperature();
    return h;
  }

  // Runs until the step budget, early stop, or `max_new_steps` more steps
  // (for interruption tests). Appends rows to the log stream when given.
  TrainResult run(std::ostream* log = nullptr, const std::string& out_dir = "", long long max_new_steps = -1) {
    TrainResult result;
    const long long stop_at = max_new_steps < 0 ? cfg_.total_steps
                                                : std::min(cfg_.total_steps, steps_done_ + max_new_steps);
    if (log && steps_done_ == 0 && cfg_.total_steps > 0) *log << LogRow::csv_header() << "\n";
    if (steps_done_ == 0 && cfg_.total_steps > 0) emit_row(result, log);  // step-0 snapshot
    while (steps_done_ < stop_at) {
      step_iteration();
      ++iter_in_fragment_;
      if (iter_in_fragment_ == cfg_.update_every) {
        iter_in_fragment_ = 0;
        barrier_updates();
        if (steps_done_ >= next_eval_mark_ + cfg_.eval_interval) {
          next_eval_mark_ += cfg_.eval_interval;
          emit_row(result, log);
          if (cfg_.stop_at_success > 0.0 && result.rows.back().eval_success >= cfg_.stop_at_success) {
            result.early_stopped = true;
            break;
          }
        }
        if (next_ckpt_mark_ > 0 && steps_done_ >= next_ckpt_mark_ && !out_dir.empty()) {
          next_ckpt_mark_ += cfg_.checkpoint_interval;
          save_model_checkpoint(out_dir + "/ckpt_" + std::to_string(steps_done_) + ".eclab");
          save_run_state(out_dir + "/run_state_" + std::to_string(steps_done_) + ".bin");
        }
      }
    }
    if (!out_dir.empty()) {
      save_model_checkpoint(out_dir + "/ckpt_final.eclab");
      save_run_state(out_dir + "/run_state_final.bin");
    }
    result.steps_done = steps_done_;
    if (!result.rows.empty()) result.final_eval = result.rows.back().eval_success;
    return result;
  }

  // Tensor container with both agents (and language) for eval/ci/render.
  std::vector<std::pair<std::string, Tensor>> model_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : listener_.params.items()) out.emplace_back("listener/" + name, t);
    if (pg_)
      for (const auto& [name, t] : pg_->params.items()) out.emplace_back("speaker/" + name, t);
    if (cco_)
      for (const auto& [name, t] : cco_->params.items()) out.emplace_back("speaker/" + name, t);
    if (fixed_) {
      int idx = 0;
      for (const auto& [task, utt] : fixed_->entries) {
        std::vector<double> vals = {static_cast<double>(static_cast<int>(task.mission)),
                                    static_cast<double>(task.color), static_cast<double>(task.count)};
        for (int s : utt.symbols) vals.push_back(static_cast<double>(s));
        out.emplace_back("fixed_language/" + std::to_string(idx++),
                         Tensor::from(std::move(vals), {3 + utt.length()}));
      }
    }
    return out;
  }

  void save_model_checkpoint(const std::string& path) const { save_checkpoint(path, model_tensors()); }

  // -- full run-state snapshot ----------------------------------------------

  void save_run_state(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + path);
    os.write(kRunStateMagic, 5);
    detail::put_u32(os, kRunStateVersion);
    detail::put_u64(os, cfg_.seed);
    detail::put_u64(os, static_cast<std::uint64_t>(steps_done_));
    detail::put_u64(os, static_cast<std::uint64_t>(episodes_done_));
    detail::put_u64(os, static_cast<std::uint64_t>(episode_serial_));
    detail::put_u64(os, static_cast<std::uint64_t>(next_eval_mark_));
    detail::put_u64(os, static_cast<std::uint64_t>(next_ckpt_mark_ < 0 ? 0 : next_ckpt_mark_));
    detail::put_u32(os, static_cast<std::uint32_t>(cfg_.num_envs));

    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto& [name, t] : listener_.params.items()) tensors.emplace_back("L/" + name, t);
    append_opt_state(tensors, "OL/", listener_.params, *listener_opt_);
    if (pg_) {
      for (const auto& [name, t] : pg_->params.items()) tensors.emplace_back("S/" + name, t);
      if (speaker_opt_) append_opt_state(tensors, "OS/", pg_->params, *speaker_opt_);
    }
    if (cco_) {
      for (const auto& [name, t] : cco_->params.items()) tensors.emplace_back("S/" + name, t);
      if (speaker_opt_) append_opt_state(tensors, "OS/", cco_->params, *speaker_opt_);
    }
    write_tensors(os, tensors);

    for (const EnvSlot& s : envs_) {
      for (int i = 0; i < 4; ++i) detail::put_u64(os, s.rng.state_word(i));
      detail::put_u64(os, s.world_seed);
      write_task(os, s.task);
      write_world(os, s.state);
      write_utt(os, s.utt);
      os.put(static_cast<char>(s.ended_with_end));
      detail::put_u32(os, static_cast<std::uint32_t>(s.record.actions.size()));
      for (Action a : s.record.actions) os.put(static_cast<char>(a));
      for (double r : s.record.listener_rewards) detail::put_f64(os, r);
      detail::put_u64(os, static_cast<std::uint64_t>(s.serial));
    }

    detail::put_u32(os, static_cast<std::uint32_t>(episode_buffer_.size()));
    for (const EpisodeRecord& ep : episode_buffer_) {
      write_task(os, ep.task);
      write_utt(os, ep.utterance);
      os.put(static_cast<char>(ep.ended_with_end));
      os.put(static_cast<char>(ep.success));
      detail::put_f64(os, ep.speaker_return);
      detail::put_u64(os, ep.world_seed);
    }

    detail::put_u32(os, static_cast<std::uint32_t>(ma_window_.size()));
    for (bool b : ma_window_) os.put(static_cast<char>(b));
    detail::put_f64(os, speaker_loss_sum_);
    detail::put_u64(os, static_cast<std::uint64_t>(speaker_updates_));
    detail::put_f64(os, lpolicy_sum_);
    detail::put_f64(os, lvalue_sum_);
    detail::put_u64(os, static_cast<std::uint64_t>(listener_updates_));
    detail::put_f64(os, utt_len_sum_);
    detail::put_u64(os, static_cast<std::uint64_t>(utt_len_count_));
    if (!os) throw CheckpointError("write failed for " + path);
  }

  static TrainingSession restore(const TrainConfig& cfg, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kRunStateMagic, 5) != 0) throw CheckpointError(path + ": not a run-state file");
    if (detail::get_u32(is) != kRunStateVersion) throw CheckpointError(path + ": unsupported run-state version");
    const std::uint64_t seed = detail::get_u64(is);
    if (seed != cfg.seed) throw CheckpointError(path + ": run state was produced with a different seed");

    TrainingSession s(cfg);
    s.steps_done_ = static_cast<long long>(detail::get_u64(is));
    s.episodes_done_ = static_cast<long long>(detail::get_u64(is));
    s.episode_serial_ = static_cast<long long>(detail::get_u64(is));
    s.next_eval_mark_ = static_cast<long long>(detail::get_u64(is));
    const long long ckpt_mark = static_cast<long long>(detail::get_u64(is));
    s.next_ckpt_mark_ = cfg.checkpoint_interval > 0 ? ckpt_mark : -1;
    const std::uint32_t n_envs = detail::get_u32(is);
    if (static_cast<int>(n_envs) != cfg.num_envs) throw CheckpointError(path + ": num_envs mismatch");

    auto tensors = read_tensors(is, path);
    std::vector<std::pair<std::string, Tensor>> lt, st, olt, ost;
    for (auto& [name, t] : tensors) {
      if (name.rfind("L/", 0) == 0) lt.emplace_back(name.substr(2), t);
      else if (name.rfind("S/", 0) == 0) st.emplace_back(name.substr(2), t);
      else if (name.rfind("OL/", 0) == 0) olt.emplace_back(name.substr(3), t);
      else if (name.rfind("OS/", 0) == 0) ost.emplace_back(name.substr(3), t);
    }
    apply_checkpoint(s.listener_.params, lt);
    restore_opt_state(s.listener_.params, *s.listener_opt_, olt);
    if (s.pg_) {
      apply_checkpoint(s.pg_->params, st);
      if (s.speaker_opt_) restore_opt_state(s.pg_->params, *s.speaker_opt_, ost);
    }
    if (s.cco_) {
      apply_checkpoint(s.cco_->params, st);
      if (s.speaker_opt_) restore_opt_state(s.cco_->params, *s.speaker_opt_, ost);
    }

    for (EnvSlot& slot : s.envs_) {
      std::uint64_t w[4];
      for (auto& x : w) x = detail::get_u64(is);
      slot.rng.set_state(w);
      slot.world_seed = detail::get_u64(is);
      slot.task = read_task(is);
      slot.state = read_world(is, slot.task);
      slot.utt = read_utt(is);
      slot.ended_with_end = is.get() != 0;
      const std::uint32_t n_act = detail::get_u32(is);
      slot.record = EpisodeRecord{};
      slot.record.task = slot.task;
      slot.record.utterance = slot.utt;
      slot.record.world_seed = slot.world_seed;
      slot.record.ended_with_end = slot.ended_with_end;
      for (std::uint32_t i = 0; i < n_act; ++i) slot.record.actions.push_back(static_cast<Action>(is.get()));
      for (std::uint32_t i = 0; i < n_act; ++i) slot.record.listener_rewards.push_back(detail::get_f64(is));
      slot.serial = static_cast<long long>(detail::get_u64(is));
      slot.world_img = render_world(slot.state);
      slot.inv_img = render_inventory(slot.state);
      slot.goal_img = render_goal(slot.task);
      slot.rep_version = kNoVersion;
    }

    s.episode_buffer_.clear();
    const std::uint32_t n_ep = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_ep; ++i) {
      EpisodeRecord ep;
      ep.task = read_task(is);
      ep.utterance = read_utt(is);
      ep.ended_with_end = is.get() != 0;
      ep.success = is.get() != 0;
      ep.speaker_return = detail::get_f64(is);
      ep.world_seed = detail::get_u64(is);
      s.episode_buffer_.push_back(std::move(ep));
    }

    s.ma_window_.clear();
    const std::uint32_t n_ma = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_ma; ++i) s.ma_window_.push_back(is.get() != 0);
    s.speaker_loss_sum_ = detail::get_f64(is);
    s.speaker_updates_ = static_cast<long long>(detail::get_u64(is));
    s.lpolicy_sum_ = detail::get_f64(is);
    s.lvalue_sum_ = detail::get_f64(is);
    s.listener_updates_ = static_cast<long long>(detail::get_u64(is));
    s.utt_len_sum_ = detail::get_f64(is);
    s.utt_len_count_ = static_cast<long long>(detail::get_u64(is));
    if (!is) throw CheckpointError(path + ": truncated run state");
    return s;
  }

 private:
  static constexpr std::uint64_t kNoVersion = ~0ull;

  struct EnvSlot {
    Rng rng{0};
    WorldState state;
    Task task;
    std::uint64_t world_seed = 0;
    Tensor world_img, inv_img, goal_img, w0_img;
    Utterance utt;
    bool ended_with_end = false;
    EpisodeRecord record;
    long long serial = 0;
    std::uint64_t rep_version = kNoVersion;
    Tensor rep;
  };

  void build_nets() {
    listener_ = ListenerNet::make(cfg_.vocab_size, cfg_.max_len, cfg_.encoder_mode, master_.substream("listener_net"));
    listener_opt_ = std::make_unique<Rmsprop>(listener_.params, RmspropConfig{cfg_.lr_listener, 0.99, 1e-5});
    switch (cfg_.speaker_kind) {
      case SpeakerKind::PG:
      case SpeakerKind::PGLowEnt:
      case SpeakerKind::PGFixed:
        pg_ = std::make_unique<SpeakerPGNet>(
            SpeakerPGNet::make(cfg_.vocab_size, cfg_.max_len, master_.substream("speaker_net")));
        speaker_opt_ = std::make_unique<Rmsprop>(pg_->params, RmspropConfig{cfg_.lr_speaker, 0.99, 1e-5});
        break;
      case SpeakerKind::CCO:
      case SpeakerKind::NoTrainCCO:
        cco_ = std::make_unique<SpeakerCCONet>(
            SpeakerCCONet::make(cfg_.vocab_size, cfg_.max_len, cfg_.encoder_mode, master_.substream("speaker_net")));
        if (cfg_.speaker_kind == SpeakerKind::CCO)
          speaker_opt_ = std::make_unique<Rmsprop>(cco_->params, RmspropConfig{cfg_.lr_speaker, 0.99, 1e-5});
        break;
      case SpeakerKind::FixedRand: {
        Rng lr = master_.substream("fixed_language");
        fixed_ = std::make_unique<FixedLanguage>(
            make_fixedrand_speaker(cfg_.env, cfg_.vocab_size, cfg_.max_len, lr));
        break;
      }
    }
  }

  void apply_freezing() {
    if (cfg_.freeze_listener_world) listener_.params.freeze_pathway("world_encoder");
    if (cco_) cco_->params.freeze_pathway("world_encoder");
    if (pg_ && cfg_.speaker_kind == SpeakerKind::PGFixed) pg_->params.freeze_pathway("world_encoder");
  }

  static void alias_critic(ParamSet& ps, const std::vector<std::pair<std::string, Tensor>>& pretrained) {
    // the pre-trained value head seeds the speaker critic
    for (const auto& [name, t] : pretrained) {
      if (name == "world_encoder/value_w") {
        if (Tensor* dst = ps.find("critic_head/w"))
          for (std::size_t i = 0; i < t.numel(); ++i) (*dst)[i] = t[i];
      } else if (name == "world_encoder/value_b") {
        if (Tensor* dst = ps.find("critic_head/b"))
          for (std::size_t i = 0; i < t.numel(); ++i) (*dst)[i] = t[i];
      }
    }
  }

  static void append_opt_state(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                               const ParamSet& ps, Rmsprop& opt) {
    auto& acc = opt.accumulators();
    for (std::size_t i = 0; i < ps.items().size(); ++i)
      out.emplace_back(prefix + ps.items()[i].first,
                       Tensor::from(acc[i], {static_cast<int>(acc[i].size())}));
  }

  static void restore_opt_state(const ParamSet& ps, Rmsprop& opt,
                                const std::vector<std::pair<std::string, Tensor>>& loaded) {
    auto& acc = opt.accumulators();
    for (std::size_t i = 0; i < ps.items().size(); ++i) {
      for (const auto& [name, t] : loaded)
        if (name == ps.items()[i].first) {
          if (t.numel() != acc[i].size()) throw CheckpointError("optimizer state size mismatch for " + name);
          for (std::size_t j = 0; j < t.numel(); ++j) acc[i][j] = t[j];
        }
    }
  }

  static void write_task(std::ostream& os, const Task& t) {
    os.put(static_cast<char>(t.mission));
    os.put(static_cast<char>(t.color));
    os.put(static_cast<char>(t.count));
  }
  static Task read_task(std::istream& is) {
    Task t;
    t.mission = static_cast<Mission>(is.get());
    t.color = is.get();
    t.count = is.get();
    return t;
  }
  static void write_utt(std::ostream& os, const Utterance& u) {
    detail::put_u32(os, static_cast<std::uint32_t>(u.symbols.size()));
    for (int s : u.symbols) os.put(static_cast<char>(s));
  }
  static Utterance read_utt(std::istream& is) {
    Utterance u;
    const std::uint32_t n = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) u.symbols.push_back(is.get());
    return u;
  }
  static void write_world(std::ostream& os, const WorldState& w) {
    for (int v : w.grid) os.put(static_cast<char>(v));
    os.put(static_cast<char>(w.agent_row));
    os.put(static_cast<char>(w.agent_col));
    detail::put_u32(os, static_cast<std::uint32_t>(w.steps_taken));
    os.put(static_cast<char>(w.status));
    detail::put_u32(os, static_cast<std::uint32_t>(w.inventory.size()));
    for (const InventoryItem& it : w.inventory) {
      os.put(static_cast<char>(it.color));
      os.put(static_cast<char>(it.painted));
    }
  }
  static WorldState read_world(std::istream& is, const Task& task) {
    WorldState w;
    w.task = task;
    w.drop_zone_active = task.mission == Mission::Bring;
    for (auto& v : w.grid) v = static_cast<signed char>(is.get());
    w.agent_row = is.get();
    w.agent_col = is.get();
    w.steps_taken = static_cast<int>(detail::get_u32(is));
    w.status = static_cast<Status>(is.get());
    const std::uint32_t n = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      InventoryItem it;
      it.color = is.get();
      it.painted = is.get() != 0;
      w.inventory.push_back(it);
    }
    return w;
  }

  void reset_env(EnvSlot& s) {
    s.task = sample_task(s.rng, cfg_.env);
    s.world_seed = s.rng.next_u64() & ~kEvalSeedBit;
    Rng wr(s.world_seed);
    s.state = generate_world(wr, s.task, cfg_.env);
    s.world_img = render_world(s.state);
    s.inv_img = render_inventory(s.state);
    s.goal_img = render_goal(s.task);
    s.w0_img = s.world_img;
    auto spoken = speaker_handle().speak(s.w0_img, s.goal_img, s.task, /*greedy=*/false, &s.rng);
    s.utt = std::move(spoken.utt);
    s.ended_with_end = spoken.ended_with_end;
    s.record = EpisodeRecord{};
    s.record.task = s.task;
    s.record.utterance = s.utt;
    s.record.world_seed = s.world_seed;
    s.record.ended_with_end = s.ended_with_end;
    s.serial = episode_serial_++;
    s.rep_version = kNoVersion;
  }

  void step_iteration() {
    for (int i = 0; i < cfg_.num_envs; ++i) {
      EnvSlot& s = envs_[static_cast<std::size_t>(i)];
      if (s.rep_version != listener_version_) {
        s.rep = utterance_rep(listener_.utt, s.utt);
        s.rep_version = listener_version_;
      }
      PolicyValue pv = listener_forward_cached(listener_, s.world_img, s.inv_img, s.rep);
      Tensor probs = softmax(pv.logits);
      double u = s.rng.next_double(), acc = 0.0;
      int action = kNumActions - 1;
      for (int j = 0; j < kNumActions; ++j) {
        acc += probs[static_cast<std::size_t>(j)];
        if (u < acc) {
          action = j;
          break;
        }
      }
      auto [next, outcome] = step(s.state, static_cast<Action>(action), cfg_.env);
      fragments_[static_cast<std::size_t>(i)].push_back(
          {s.world_img, s.inv_img, s.serial, s.utt, action, outcome.reward, outcome.status != Status::Ongoing});
      s.record.actions.push_back(static_cast<Action>(action));
      s.record.listener_rewards.push_back(outcome.reward);
      s.state = next;
      ++steps_done_;
      if (next.status != Status::Ongoing) {
        s.record.success = next.status == Status::Success;
        s.record.speaker_return = speaker_return(s.record.success);
        ma_window_.push_back(s.record.success);
        if (ma_window_.size() > 100) ma_window_.pop_front();
        utt_len_sum_ += s.record.utterance.length();
        utt_len_count_ += 1;
        ++episodes_done_;
        episode_buffer_.push_back(std::move(s.record));
        reset_env(s);
      } else {
        s.world_img = render_world(s.state);
        s.inv_img = render_inventory(s.state);
      }
    }
  }

  void barrier_updates() {
    std::vector<double> bootstrap(static_cast<std::size_t>(cfg_.num_envs), 0.0);
    for (int i = 0; i < cfg_.num_envs; ++i) {
      const auto& frag = fragments_[static_cast<std::size_t>(i)];
      if (!frag.empty() && !frag.back().done) {
        EnvSlot& s = envs_[static_cast<std::size_t>(i)];
        if (s.rep_version != listener_version_) {
          s.rep = utterance_rep(listener_.utt, s.utt);
          s.rep_version = listener_version_;
        }
        bootstrap[static_cast<std::size_t>(i)] =
            listener_forward_cached(listener_, s.world_img, s.inv_img, s.rep).value.item();
      }
    }
    ListenerLosses ll = a2c_listener_update(listener_, *listener_opt_, fragments_, bootstrap, cfg_);
    ++listener_version_;
    ++listener_updates_;
    lpolicy_sum_ += ll.policy;
    lvalue_sum_ += ll.value;
    for (auto& f : fragments_) f.clear();

    while (episode_buffer_.size() >= static_cast<std::size_t>(cfg_.num_envs)) {
      std::vector<EpisodeRecord> batch(episode_buffer_.begin(),
                                       episode_buffer_.begin() + cfg_.num_envs);
      episode_buffer_.erase(episode_buffer_.begin(), episode_buffer_.begin() + cfg_.num_envs);
      switch (cfg_.speaker_kind) {
        case SpeakerKind::PG:
        case SpeakerKind::PGLowEnt:
        case SpeakerKind::PGFixed:
          speaker_loss_sum_ += pg_speaker_update(*pg_, *speaker_opt_, batch, cfg_);
          ++speaker_updates_;
          break;
        case SpeakerKind::CCO:
          speaker_loss_sum_ += cco_speaker_update(*cco_, *speaker_opt_, batch, cfg_);
          ++speaker_updates_;
          break;
        case SpeakerKind::NoTrainCCO:
        case SpeakerKind::FixedRand:
          break;  // consistent speakers: no update
      }
    }
  }

  void emit_row(TrainResult& result, std::ostream* log) {
    LogRow row;
    row.step = steps_done_;
    row.episodes = episodes_done_;
    double ma = 0.0;
    for (bool b : ma_window_) ma += b;
    row.train_success_ma = ma_window_.empty() ? 0.0 : ma / static_cast<double>(ma_window_.size());
    EvalResult ev = evaluate(speaker_handle(), listener_, cfg_, cfg_.eval_worlds, master_.substream("eval"));
    row.eval_success = ev.success_rate;
    row.speaker_loss = speaker_updates_ ? speaker_loss_sum_ / static_cast<double>(speaker_updates_) : 0.0;
    row.listener_policy_loss = listener_updates_ ? lpolicy_sum_ / static_cast<double>(listener_updates_) : 0.0;
    row.listener_value_loss = listener_updates_ ? lvalue_sum_ / static_cast<double>(listener_updates_) : 0.0;
    row.mean_utterance_len = utt_len_count_ ? utt_len_sum_ / static_cast<double>(utt_len_count_) : 0.0;
    speaker_loss_sum_ = lpolicy_sum_ = lvalue_sum_ = utt_len_sum_ = 0.0;
    speaker_updates_ = listener_updates_ = utt_len_count_ = 0;
    result.rows.push_back(row);
    if (log) {
      *log << row.csv() << "\n";
      log->flush();
    }
  }

  TrainConfig cfg_;
  Rng master_;
  ListenerNet listener_;
  std::unique_ptr<Rmsprop> listener_opt_;
  std::unique_ptr<SpeakerPGNet> pg_;
  std::unique_ptr<SpeakerCCONet> cco_;
  std::unique_ptr<FixedLanguage> fixed_;
  std::unique_ptr<Rmsprop> speaker_opt_;
  std::vector<EnvSlot> envs_;
  std::vector<std::vector<Transition>> fragments_;
  std::vector<EpisodeRecord> episode_buffer_;
  std::deque<bool> ma_window_;
  long long steps_done_ = 0;
  long long episodes_done_ = 0;
  long long episode_serial_ = 0;
  int iter_in_fragment_ = 0;
  std::uint64_t listener_version_ = 0;
  long long next_eval_mark_ = 0;
  long long next_ckpt_mark_ = -1;
  double speaker_loss_sum_ = 0.0;
  long long speaker_updates_ = 0;
  double lpolicy_sum_ = 0.0;
  double lvalue_sum_ = 0.0;
  long long listener_updates_ = 0;
  double utt_len_sum_ = 0.0;
  long long utt_len_count_ = 0;
};

// Convenience wrapper matching the operation contract.
inline TrainResult run_training(const TrainConfig& cfg, std::ostream* log = nullptr,
                                const std::string& out_dir = "",
                                const std::vector<std::pair<std::string, Tensor>>* pretrained = nullptr) {
  TrainingSession session(cfg, pretrained);
  return session.run(log, out_dir);
}

}  // namespace eclab
