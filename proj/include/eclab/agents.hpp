#pragma once

#include <optional>
#include <string>
#include <vector>

#include "eclab/gridworld.hpp"
#include "eclab/params.hpp"
#include "eclab/rng.hpp"
#include "eclab/tensor.hpp"

namespace eclab {

inline constexpr int kHidden = 50;        // GRU cell and hidden representation size
inline constexpr int kConv1Filters = 6;   // l
inline constexpr int kConv2Filters = 8;   // k, spatial factor of the utterance rep
inline constexpr int kCells = 25;         // conv1 output cells (5x5)
inline constexpr int kRepLen = kConv1Filters * kConv2Filters;  // 48, FF1 output
inline constexpr int kGoalFlat = kCells * kConv1Filters;       // 150, flattened conv1(goal)

enum class EncoderMode { Gru, Bow };

struct Utterance {
  std::vector<int> symbols;  // ids in [0, vocab_size); END is implicit

  int length() const { return static_cast<int>(symbols.size()); }
  bool operator==(const Utterance&) const = default;

  void validate(int vocab_size, int max_len) const {
    if (symbols.empty()) throw ValueError("utterance must be nonempty");
    if (length() > max_len)
      throw ValueError("utterance length " + std::to_string(length()) + " exceeds max " + std::to_string(max_len));
    for (int s : symbols)
      if (s < 0 || s >= vocab_size)
        throw ValueError("utterance symbol " + std::to_string(s) + " outside vocabulary of size " +
                         std::to_string(vocab_size));
  }
};

// ---------------------------------------------------------------------------
// parameter bundles (handles into a ParamSet; copies share storage)
// ---------------------------------------------------------------------------

struct VisualCore {
  Tensor conv1_w, conv1_b;  // [3,3,3,6],[6]
  Tensor conv2_w, conv2_b;  // [3,3,8,8],[8]
  Tensor ff2_w, ff2_b;      // [272,50],[50]
};

struct GoalEncoder {
  Tensor ff_w, ff_b;  // [150,48],[48]
};

struct UtteranceEncoder {
  EncoderMode mode = EncoderMode::Gru;
  Tensor embed;  // [V,50]
  GruParams gru;
  Tensor ff1_w, ff1_b;  // [50,48],[48]
};

struct Heads {
  Tensor action_w, action_b;  // [50,6],[6]
  Tensor value_w, value_b;    // [50,1],[1]
};

namespace detail {

inline VisualCore add_visual_core(ParamSet& ps, const Rng& rng) {
  VisualCore c;
  c.conv1_w = ps.add("world_encoder/conv1_w", {3, 3, 3, kConv1Filters}, 27, rng);
  c.conv1_b = ps.add("world_encoder/conv1_b", {kConv1Filters}, 27, rng);
  c.conv2_w = ps.add("world_encoder/conv2_w", {3, 3, kConv2Filters, kConv2Filters}, 9 * kConv2Filters, rng);
  c.conv2_b = ps.add("world_encoder/conv2_b", {kConv2Filters}, 9 * kConv2Filters, rng);
  const int ff2_in = 9 * kConv2Filters + kCells * kConv2Filters;  // conv2 output + m_i
  c.ff2_w = ps.add("world_encoder/ff2_w", {ff2_in, kHidden}, ff2_in, rng);
  c.ff2_b = ps.add("world_encoder/ff2_b", {kHidden}, ff2_in, rng);
  return c;
}

inline GoalEncoder add_goal_encoder(ParamSet& ps, const Rng& rng) {
  GoalEncoder g;
  g.ff_w = ps.add("world_encoder/goal_ff_w", {kGoalFlat, kRepLen}, kGoalFlat, rng);
  g.ff_b = ps.add("world_encoder/goal_ff_b", {kRepLen}, kGoalFlat, rng);
  return g;
}

inline GruParams add_gru(ParamSet& ps, const std::string& prefix, int d_in, int d_h, const Rng& rng) {
  GruParams g;
  g.wx_r = ps.add(prefix + "gru_wx_r", {d_in, d_h}, d_in, rng);
  g.wh_r = ps.add(prefix + "gru_wh_r", {d_h, d_h}, d_h, rng);
  g.b_r = ps.add(prefix + "gru_b_r", {d_h}, d_in, rng);
  g.wx_z = ps.add(prefix + "gru_wx_z", {d_in, d_h}, d_in, rng);
  g.wh_z = ps.add(prefix + "gru_wh_z", {d_h, d_h}, d_h, rng);
  g.b_z = ps.add(prefix + "gru_b_z", {d_h}, d_in, rng);
  g.wx_h = ps.add(prefix + "gru_wx_h", {d_in, d_h}, d_in, rng);
  g.wh_h = ps.add(prefix + "gru_wh_h", {d_h, d_h}, d_h, rng);
  g.b_h = ps.add(prefix + "gru_b_h", {d_h}, d_in, rng);
  return g;
}

inline UtteranceEncoder add_utterance_encoder(ParamSet& ps, int vocab_size, EncoderMode mode, const Rng& rng) {
  UtteranceEncoder e;
  e.mode = mode;
  e.embed = ps.add("utterance_encoder/embed", {vocab_size, kHidden}, kHidden, rng);
  if (mode == EncoderMode::Gru) e.gru = add_gru(ps, "utterance_encoder/", kHidden, kHidden, rng);
  e.ff1_w = ps.add("utterance_encoder/ff1_w", {kHidden, kRepLen}, kHidden, rng);
  e.ff1_b = ps.add("utterance_encoder/ff1_b", {kRepLen}, kHidden, rng);
  return e;
}

inline Heads add_heads(ParamSet& ps, const Rng& rng) {
  Heads h;
  h.action_w = ps.add("world_encoder/action_w", {kHidden, kNumActions}, kHidden, rng);
  h.action_b = ps.add("world_encoder/action_b", {kNumActions}, kHidden, rng);
  h.value_w = ps.add("world_encoder/value_w", {kHidden, 1}, kHidden, rng);
  h.value_b = ps.add("world_encoder/value_b", {1}, kHidden, rng);
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

// The all-background image an empty inventory renders to; the speaker
// pathways see it in the aux slot at t=0.
inline const Tensor& empty_inventory_image() {
  static const Tensor img = render_inventory(WorldState{});
  return img;
}

// Embedding sequence -> single vector: BOW mean or last GRU hidden state.
inline Tensor utterance_summary(const UtteranceEncoder& enc, const Utterance& u) {
  std::vector<Tensor> embs;
  embs.reserve(u.symbols.size());
  for (int s : u.symbols) embs.push_back(embed_lookup(enc.embed, s));
  if (enc.mode == EncoderMode::Bow) return bow_average(embs);
  Tensor h = Tensor::zeros({kHidden});
  for (const Tensor& x : embs) h = gru_step(x, h, enc.gru);
  return h;
}

// n_u: FF1 over the utterance summary, reshaped to [l, k].
inline Tensor utterance_rep(const UtteranceEncoder& enc, const Utterance& u) {
  Tensor r = relu(affine(utterance_summary(enc, u), enc.ff1_w, enc.ff1_b));
  return reshape(r, {kConv1Filters, kConv2Filters});
}

// n_g: conv1 over the goal image, flattened, through the goal feed-forward.
inline Tensor goal_rep(const VisualCore& core, const GoalEncoder& goal, const Tensor& goal_img) {
  Tensor g = relu(conv2d(goal_img, core.conv1_w, core.conv1_b, 3));
  Tensor r = relu(affine(reshape(g, {kGoalFlat}), goal.ff_w, goal.ff_b));
  return reshape(r, {kConv1Filters, kConv2Filters});
}

// Shared trunk: conv1 on both images, multiplicative interaction with the
// rep, conv2 on m_w, concat with m_i, FF2 -> h.
inline Tensor context_hidden(const VisualCore& core, const Tensor& world_img, const Tensor& aux_img,
                             const Tensor& rep) {
  Tensor w = relu(conv2d(world_img, core.conv1_w, core.conv1_b, 3));
  Tensor n_w = l2_normalize(reshape(w, {kCells, kConv1Filters}));
  Tensor a = relu(conv2d(aux_img, core.conv1_w, core.conv1_b, 3));
  Tensor n_i = reshape(a, {kCells, kConv1Filters});
  Tensor n_u = l2_normalize(rep);
  Tensor m_w = matmul(n_w, n_u);
  Tensor c2 = relu(conv2d(reshape(m_w, {kGridSize, kGridSize, kConv2Filters}), core.conv2_w, core.conv2_b, 1));
  Tensor m_i = matmul(n_i, n_u);
  return relu(affine(concat(c2, m_i), core.ff2_w, core.ff2_b));
}

struct PolicyValue {
  Tensor logits;  // [6]
  Tensor value;   // [1]
};

// ---------------------------------------------------------------------------
// listener
// ---------------------------------------------------------------------------

struct ListenerNet {
  ParamSet params;
  VisualCore core;
  UtteranceEncoder utt;
  Heads heads;
  int vocab_size = 0;
  int max_len = 0;

  static ListenerNet make(int vocab_size, int max_len, EncoderMode mode, const Rng& rng) {
    ListenerNet n;
    n.vocab_size = vocab_size;
    n.max_len = max_len;
    n.core = detail::add_visual_core(n.params, rng);
    n.heads = detail::add_heads(n.params, rng);
    n.utt = detail::add_utterance_encoder(n.params, vocab_size, mode, rng);
    return n;
  }
};

inline PolicyValue listener_forward(const ListenerNet& net, const Tensor& world_img, const Tensor& inventory_img,
                                    const Utterance& u) {
  u.validate(net.vocab_size, net.max_len);
  Tensor h = context_hidden(net.core, world_img, inventory_img, utterance_rep(net.utt, u));
  return {affine(h, net.heads.action_w, net.heads.action_b), affine(h, net.heads.value_w, net.heads.value_b)};
}

// Same trunk with a precomputed utterance rep (the rep only changes when the
// utterance or the encoder parameters do).
inline PolicyValue listener_forward_cached(const ListenerNet& net, const Tensor& world_img,
                                           const Tensor& inventory_img, const Tensor& rep) {
  Tensor h = context_hidden(net.core, world_img, inventory_img, rep);
  return {affine(h, net.heads.action_w, net.heads.action_b), affine(h, net.heads.value_w, net.heads.value_b)};
}

// ---------------------------------------------------------------------------
// single-agent network (pre-training): acts from (w_t, i_t, g)
// ---------------------------------------------------------------------------

struct SingleAgentNet {
  ParamSet params;
  VisualCore core;
  GoalEncoder goal;
  Heads heads;

  static SingleAgentNet make(const Rng& rng) {
    SingleAgentNet n;
    n.core = detail::add_visual_core(n.params, rng);
    n.heads = detail::add_heads(n.params, rng);
    n.goal = detail::add_goal_encoder(n.params, rng);
    return n;
  }
};

inline PolicyValue single_agent_forward(const SingleAgentNet& net, const Tensor& world_img,
                                        const Tensor& inventory_img, const Tensor& goal_img) {
  Tensor h = context_hidden(net.core, world_img, inventory_img, goal_rep(net.core, net.goal, goal_img));
  return {affine(h, net.heads.action_w, net.heads.action_b), affine(h, net.heads.value_w, net.heads.value_b)};
}

// ---------------------------------------------------------------------------
// policy-gradient speaker
// ---------------------------------------------------------------------------

struct SpeakerPGNet {
  ParamSet params;
  VisualCore core;
  GoalEncoder goal;
  Tensor dec_embed;  // [V,50]
  GruParams dec_gru;
  Tensor dec_out_w, dec_out_b;  // [50,V+1]; index V is END
  Tensor vs_w, vs_b;            // critic head
  int vocab_size = 0;
  int max_len = 0;

  static SpeakerPGNet make(int vocab_size, int max_len, const Rng& rng) {
    SpeakerPGNet n;
    n.vocab_size = vocab_size;
    n.max_len = max_len;
    n.core = detail::add_visual_core(n.params, rng);
    n.goal = detail::add_goal_encoder(n.params, rng);
    n.dec_embed = n.params.add("decoder/embed", {vocab_size, kHidden}, kHidden, rng);
    n.dec_gru = detail::add_gru(n.params, "decoder/", kHidden, kHidden, rng);
    n.dec_out_w = n.params.add("decoder/out_w", {kHidden, vocab_size + 1}, kHidden, rng);
    n.dec_out_b = n.params.add("decoder/out_b", {vocab_size + 1}, kHidden, rng);
    n.vs_w = n.params.add("critic_head/w", {kHidden, 1}, kHidden, rng);
    n.vs_b = n.params.add("critic_head/b", {1}, kHidden, rng);
    return n;
  }

  Tensor hidden_for(const Tensor& w0_img, const Tensor& goal_img) const {
    return context_hidden(core, w0_img, empty_inventory_image(), goal_rep(core, goal, goal_img));
  }
  Tensor value_for(const Tensor& h_g) const { return affine(h_g, vs_w, vs_b); }
};

inline constexpr double kEndMask = 1e9;  // subtracted from the END logit at step 1

struct PgDecodeResult {
  Utterance utt;
  std::vector<double> log_probs;  // one per emitted symbol, plus END when chosen
  bool ended_with_end = false;
};

// Autoregressive generation over V plus END. Logits are divided by the
// temperature before the softmax; END is masked at the first step so
// utterances are nonempty. Greedy mode takes the argmax chain.
inline PgDecodeResult speaker_pg_decode(const SpeakerPGNet& net, const Tensor& w0_img, const Tensor& goal_img,
                                        bool greedy, double temperature, Rng* rng) {
  if (!(temperature > 0.0)) throw ValueError("temperature must be > 0");
  PgDecodeResult out;
  Tensor h = net.hidden_for(w0_img, goal_img);
  Tensor x = Tensor::zeros({kHidden});
  const int end_id = net.vocab_size;
  for (int i = 0; i < net.max_len; ++i) {
    h = gru_step(x, h, net.dec_gru);
    Tensor logits = affine(h, net.dec_out_w, net.dec_out_b);
    if (i == 0) logits[static_cast<std::size_t>(end_id)] -= kEndMask;
    Tensor logp = log_softmax(logits, temperature);
    int chosen;
    if (greedy) {
      chosen = 0;
      for (int j = 1; j <= net.vocab_size; ++j)
        if (logp[static_cast<std::size_t>(j)] > logp[static_cast<std::size_t>(chosen)]) chosen = j;
    } else {
      double u = rng->next_double(), acc = 0.0;
      chosen = end_id;
      for (int j = 0; j <= net.vocab_size; ++j) {
        acc += std::exp(logp[static_cast<std::size_t>(j)]);
        if (u < acc) {
          chosen = j;
          break;
        }
      }
      if (i == 0 && chosen == end_id) chosen = net.vocab_size - 1;  // unreachable after masking; belt and braces
    }
    out.log_probs.push_back(logp[static_cast<std::size_t>(chosen)]);
    if (chosen == end_id) {
      out.ended_with_end = true;
      break;
    }
    out.utt.symbols.push_back(chosen);
    x = embed_lookup(net.dec_embed, chosen);
  }
  return out;
}

inline Tensor end_mask_vector(int vocab_size) {
  Tensor m = Tensor::zeros({vocab_size + 1});
  m[static_cast<std::size_t>(vocab_size)] = -kEndMask;
  return m;
}

// Teacher-forced re-run of the decoder on a stored utterance; returns the
// per-token log-prob tensors under the current parameters (for the update).
inline std::vector<Tensor> speaker_pg_log_probs(const SpeakerPGNet& net, const Tensor& h_g, const Utterance& u,
                                                bool ended_with_end, double temperature) {
  std::vector<Tensor> out;
  Tensor h = h_g;
  Tensor x = Tensor::zeros({kHidden});
  const int end_id = net.vocab_size;
  const int steps = u.length() + (ended_with_end ? 1 : 0);
  for (int i = 0; i < steps; ++i) {
    h = gru_step(x, h, net.dec_gru);
    Tensor logits = affine(h, net.dec_out_w, net.dec_out_b);
    if (i == 0) logits = add(logits, end_mask_vector(net.vocab_size));
    Tensor logp = log_softmax(logits, temperature);
    const int target = i < u.length() ? u.symbols[static_cast<std::size_t>(i)] : end_id;
    out.push_back(pick(logp, target));
    if (i < u.length()) x = embed_lookup(net.dec_embed, target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// context-consistent obverter speaker
// ---------------------------------------------------------------------------

struct SpeakerCCONet {
  ParamSet params;
  VisualCore core;
  GoalEncoder goal;
  UtteranceEncoder utt;
  Tensor vs_w, vs_b;
  int vocab_size = 0;
  int max_len = 0;

  static SpeakerCCONet make(int vocab_size, int max_len, EncoderMode mode, const Rng& rng) {
    SpeakerCCONet n;
    n.vocab_size = vocab_size;
    n.max_len = max_len;
    n.core = detail::add_visual_core(n.params, rng);
    n.goal = detail::add_goal_encoder(n.params, rng);
    n.utt = detail::add_utterance_encoder(n.params, vocab_size, mode, rng);
    n.vs_w = n.params.add("critic_head/w", {kHidden, 1}, kHidden, rng);
    n.vs_b = n.params.add("critic_head/b", {1}, kHidden, rng);
    return n;
  }

  Tensor h_goal(const Tensor& w0_img, const Tensor& goal_img) const {
    return context_hidden(core, w0_img, empty_inventory_image(), goal_rep(core, goal, goal_img));
  }
  Tensor h_utterance(const Tensor& w0_img, const Utterance& u) const {
    return context_hidden(core, w0_img, empty_inventory_image(), utterance_rep(utt, u));
  }
};

// Psi_S(w0, g, u) = -||h_g - h_u||_2, always <= 0, zero iff the encodings
// coincide.
inline Tensor psi_score(const SpeakerCCONet& net, const Tensor& w0_img, const Tensor& goal_img, const Utterance& u) {
  u.validate(net.vocab_size, net.max_len);
  return scale(l2_distance(net.h_goal(w0_img, goal_img), net.h_utterance(w0_img, u)), -1.0);
}

// Precomputed per-(w0, g) pieces for decoding: conv1 outputs and h_g do not
// depend on the candidate utterance.
struct CcoContext {
  Tensor n_w;  // normalized [25,6]
  Tensor n_i;  // [25,6]
  Tensor h_g;  // [50]
};

inline CcoContext make_cco_context(const SpeakerCCONet& net, const Tensor& w0_img, const Tensor& goal_img) {
  CcoContext ctx;
  Tensor w = relu(conv2d(w0_img, net.core.conv1_w, net.core.conv1_b, 3));
  ctx.n_w = l2_normalize(reshape(w, {kCells, kConv1Filters}));
  Tensor a = relu(conv2d(empty_inventory_image(), net.core.conv1_w, net.core.conv1_b, 3));
  ctx.n_i = reshape(a, {kCells, kConv1Filters});
  ctx.h_g = context_hidden(net.core, w0_img, empty_inventory_image(), goal_rep(net.core, net.goal, goal_img));
  return ctx;
}

namespace detail {

inline double psi_from_summary(const SpeakerCCONet& net, const CcoContext& ctx, const Tensor& summary) {
  Tensor rep = reshape(relu(affine(summary, net.utt.ff1_w, net.utt.ff1_b)), {kConv1Filters, kConv2Filters});
  Tensor n_u = l2_normalize(rep);
  Tensor m_w = matmul(ctx.n_w, n_u);
  Tensor c2 = relu(conv2d(reshape(m_w, {kGridSize, kGridSize, kConv2Filters}), net.core.conv2_w, net.core.conv2_b, 1));
  Tensor m_i = matmul(ctx.n_i, n_u);
  Tensor h_u = relu(affine(concat(c2, m_i), net.core.ff2_w, net.core.ff2_b));
  double sq = 0.0;
  for (std::size_t i = 0; i < h_u.numel(); ++i) {
    const double d = ctx.h_g[i] - h_u[i];
    sq += d * d;
  }
  return -std::sqrt(sq);
}

}  // namespace detail

// Greedy token-by-token decoding: at each step score every single-token
// extension, and from the second step on also the option of stopping; take
// the argmax. Ties go to the lowest symbol id, with END losing all ties.
inline Utterance cco_decode(const SpeakerCCONet& net, const Tensor& w0_img, const Tensor& goal_img) {
  const CcoContext ctx = make_cco_context(net, w0_img, goal_img);
  Utterance u;
  Tensor bow_sum = Tensor::zeros({kHidden});
  Tensor gru_h = Tensor::zeros({kHidden});
  double psi_prefix = 0.0;  // score of stopping with the current prefix
  for (int i = 1; i <= net.max_len; ++i) {
    int best_v = -1;
    double best_score = 0.0;
    for (int v = 0; v < net.vocab_size; ++v) {
      Tensor emb = embed_lookup(net.utt.embed, v);
      Tensor summary;
      if (net.utt.mode == EncoderMode::Bow) {
        summary = scale(add(bow_sum, emb), 1.0 / static_cast<double>(i));
      } else {
        summary = gru_step(emb, gru_h, net.utt.gru);
      }
      const double s = detail::psi_from_summary(net, ctx, summary);
      if (best_v < 0 || s > best_score) {
        best_v = v;
        best_score = s;
      }
    }
    if (i > 1 && psi_prefix > best_score) break;  // END wins only strictly
    u.symbols.push_back(best_v);
    psi_prefix = best_score;
    Tensor emb = embed_lookup(net.utt.embed, best_v);
    if (net.utt.mode == EncoderMode::Bow)
      bow_sum = add(bow_sum, emb);
    else
      gru_h = gru_step(emb, gru_h, net.utt.gru);
  }
  return u;
}

// Loss for one episode: the negated prefix objective
//   sum over prefixes of alpha * A * Psi(prefix),  alpha = 1 if A > 0 else 0.5.
// h_g is computed off-tape: the goal pathway is frozen, so gradients reach
// only the utterance pathway (and the critic through its own loss).
inline Tensor cco_speaker_objective(const SpeakerCCONet& net, const Tensor& w0_img, const Tensor& goal_img,
                                    const Utterance& u, double advantage) {
  if (u.symbols.empty()) throw ValueError("cco_speaker_objective: empty utterance");
  Tensor h_g;
  {
    Tape* saved = detail::tls_tape();
    detail::tls_tape() = nullptr;
    h_g = net.h_goal(w0_img, goal_img);
    detail::tls_tape() = saved;
  }
  const double alpha = advantage > 0.0 ? 1.0 : 0.5;
  Tensor psi_sum = Tensor::scalar(0.0);
  Utterance prefix;
  for (int s : u.symbols) {
    prefix.symbols.push_back(s);
    Tensor h_u = net.h_utterance(w0_img, prefix);
    psi_sum = add(psi_sum, scale(l2_distance(h_g, h_u), -1.0));
  }
  return scale(psi_sum, -alpha * advantage);
}

}  // namespace eclab
