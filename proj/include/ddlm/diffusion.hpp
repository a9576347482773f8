#pragma once

#include "ddlm/model.hpp"
#include "ddlm/rng.hpp"
#include "ddlm/sequence.hpp"

#include <cmath>
#include <vector>

namespace ddlm {

enum class ScheduleKind { Linear };

/// Noise schedule alpha(t): the survival probability of a token at time t.
/// alpha is non-increasing on (0,1], alpha(t) in [0,1), alpha -> 1 as t -> 0+.
struct MaskSchedule {
  ScheduleKind kind = ScheduleKind::Linear;

  double alpha(double t) const {
    require(t > 0.0 && t <= 1.0, "alpha: t must lie in (0, 1]");
    switch (kind) {
      case ScheduleKind::Linear:
        return 1.0 - t;
    }
    fail("alpha: unknown schedule");
  }
};

/// x_t plus the mask indicator that marks which positions were absorbed.
struct CorruptedSample {
  std::vector<int> tokens;     // x_t
  std::vector<uint8_t> mask;   // 1 where the position was replaced by MASK
  double t = 0.0;

  int masked_count() const {
    int n = 0;
    for (uint8_t m : mask) n += m;
    return n;
  }
};

/// Forward noising: each Answer/Pad position independently becomes MASK with
/// probability 1 - alpha(t). Prompt positions are never touched.
inline CorruptedSample corrupt(const Sequence& x0, const MaskSchedule& schedule, double t,
                               int mask_token, Rng& rng) {
  require(!x0.maskable_positions().empty(), "corrupt: sequence has no maskable positions");
  const double p_mask = 1.0 - schedule.alpha(t);
  CorruptedSample out;
  out.t = t;
  out.tokens = x0.tokens;
  out.mask.assign(x0.tokens.size(), 0);
  for (int i = 0; i < x0.size(); ++i) {
    if (x0.segments[size_t(i)] == Segment::Prompt) continue;
    if (rng.bernoulli(p_mask)) {
      out.tokens[size_t(i)] = mask_token;
      out.mask[size_t(i)] = 1;
    }
  }
  return out;
}

/// Reweighted masked cross-entropy: (1/t) * sum over masked positions of
/// -log p(x0_n). Zero when nothing is masked.
template <typename S>
S diffusion_loss(const Matrix<S>& logits, const CorruptedSample& sample, const Sequence& x0) {
  require(int(logits.rows()) == x0.size(), "diffusion_loss: logits/sequence length mismatch");
  require(logits.allFinite(), "diffusion_loss: non-finite logits");
  S total = S(0);
  for (int n = 0; n < x0.size(); ++n) {
    if (!sample.mask[size_t(n)]) continue;
    total -= log_softmax_at(logits.row(n), x0.tokens[size_t(n)]);
  }
  return total / S(sample.t);
}

template <typename S>
Matrix<S> diffusion_loss_grad(const Matrix<S>& logits, const CorruptedSample& sample,
                              const Sequence& x0) {
  Matrix<S> d = Matrix<S>::Zero(logits.rows(), logits.cols());
  const S w = S(1) / S(sample.t);
  for (int n = 0; n < x0.size(); ++n) {
    if (!sample.mask[size_t(n)]) continue;
    RowVec<S> probs = softmax_row(logits.row(n));
    probs(x0.tokens[size_t(n)]) -= S(1);
    d.row(n) = probs * w;
  }
  return d;
}

/// Next-token loss over Answer positions: mean of -log p(x0_n | x0_<n),
/// read from the logit row at n-1. Prompt positions are unsupervised.
template <typename S>
S ar_loss(const Matrix<S>& logits, const Sequence& x0) {
  require(int(logits.rows()) == x0.size(), "ar_loss: logits/sequence length mismatch");
  require(logits.allFinite(), "ar_loss: non-finite logits");
  S total = S(0);
  int count = 0;
  for (int n = 1; n < x0.size(); ++n) {
    if (x0.segments[size_t(n)] != Segment::Answer) continue;
    total -= log_softmax_at(logits.row(n - 1), x0.tokens[size_t(n)]);
    ++count;
  }
  require(count > 0, "ar_loss: sequence has no supervised answer tokens");
  return total / S(count);
}

template <typename S>
Matrix<S> ar_loss_grad(const Matrix<S>& logits, const Sequence& x0) {
  int count = 0;
  for (int n = 1; n < x0.size(); ++n)
    if (x0.segments[size_t(n)] == Segment::Answer) ++count;
  require(count > 0, "ar_loss_grad: sequence has no supervised answer tokens");
  Matrix<S> d = Matrix<S>::Zero(logits.rows(), logits.cols());
  const S w = S(1) / S(count);
  for (int n = 1; n < x0.size(); ++n) {
    if (x0.segments[size_t(n)] != Segment::Answer) continue;
    RowVec<S> probs = softmax_row(logits.row(n - 1));
    probs(x0.tokens[size_t(n)]) -= S(1);
    d.row(n - 1) += probs * w;
  }
  return d;
}

struct PadRange {
  int n_min = 0;
  int n_max = 0;
};

/// Window size for an answer of length l: n_min = l+1 slots; n_max is the
/// next power of two of l+1 below 16, otherwise the next multiple of 16.
inline PadRange pad_expansion_range(int answer_len) {
  require(answer_len >= 1, "pad_expansion: answer length must be >= 1");
  const int l1 = answer_len + 1;
  PadRange r;
  r.n_min = l1;
  if (l1 < 16) {
    int pow2 = 1;
    while (pow2 < l1) pow2 *= 2;
    r.n_max = pow2;
  } else {
    r.n_max = 16 * ((l1 + 15) / 16);
  }
  return r;
}

/// Draw the total answer-window size n uniformly from the range above.
inline int pad_expansion(int answer_len, Rng& rng) {
  const PadRange r = pad_expansion_range(answer_len);
  return int(rng.uniform_int(r.n_min, r.n_max));
}

/// Converts a raw sample (assistant turns terminated by EOS) into diffusion
/// form: the assistant EOS is dropped and the turn is extended with Pad
/// tokens so the answer occupies an n-slot window. User turns are unchanged.
inline Sequence prepare_diffusion_sample(const Sequence& raw, const SpecialTokens& special,
                                         Rng& rng) {
  require(!raw.turns.empty(), "prepare_diffusion_sample: sample has no turn structure");
  Sequence out;
  for (const Turn& turn : raw.turns) {
    Turn nt;
    nt.begin = int(out.tokens.size());
    nt.assistant = turn.assistant;
    if (!turn.assistant) {
      for (int i = turn.begin; i < turn.end; ++i) {
        out.tokens.push_back(raw.tokens[size_t(i)]);
        out.segments.push_back(raw.segments[size_t(i)]);
      }
    } else {
      require(turn.end - turn.begin >= 2 && raw.tokens[size_t(turn.end - 1)] == special.eos,
              "prepare_diffusion_sample: assistant turn must end with EOS");
      std::vector<int> answer;
      for (int i = turn.begin; i < turn.end - 1; ++i) {
        const int tok = raw.tokens[size_t(i)];
        if (raw.segments[size_t(i)] == Segment::Prompt) {
          out.tokens.push_back(tok);
          out.segments.push_back(Segment::Prompt);
        } else {
          answer.push_back(tok);
        }
      }
      require(!answer.empty(), "prepare_diffusion_sample: empty assistant answer");
      const int n = pad_expansion(int(answer.size()), rng);
      for (int tok : answer) {
        out.tokens.push_back(tok);
        out.segments.push_back(Segment::Answer);
      }
      for (int i = int(answer.size()); i < n; ++i) {
        out.tokens.push_back(special.pad);
        out.segments.push_back(Segment::Pad);
      }
    }
    nt.end = int(out.tokens.size());
    out.turns.push_back(nt);
  }
  return out;
}

/// Loss + gradients for next-token training (causal attention).
template <typename S>
S backward_ar(const ModelParams<S>& p, const Sequence& x0, ModelParams<S>& grads,
              S grad_scale = S(1)) {
  Activations<S> acts;
  Matrix<S> logits = forward_ex(p, std::span<const int>(x0.tokens), AttentionMode::Causal,
                                ForwardHooks<S>{.acts = &acts});
  const S loss = ar_loss(logits, x0);
  Matrix<S> d = ar_loss_grad(logits, x0) * grad_scale;
  backprop(p, std::span<const int>(x0.tokens), AttentionMode::Causal, acts, d, grads);
  return loss;
}

/// Loss + gradients for masked-denoising training (full attention). The
/// model consumes x_t; supervision applies at masked positions only, so a
/// sample with no masks yields zero loss and zero gradients.
template <typename S>
S backward_diffusion(const ModelParams<S>& p, const Sequence& x0, const CorruptedSample& sample,
                     ModelParams<S>& grads, S grad_scale = S(1)) {
  Activations<S> acts;
  Matrix<S> logits = forward_ex(p, std::span<const int>(sample.tokens), AttentionMode::Full,
                                ForwardHooks<S>{.acts = &acts});
  const S loss = diffusion_loss(logits, sample, x0);
  if (sample.masked_count() == 0) return loss;
  Matrix<S> d = diffusion_loss_grad(logits, sample, x0) * grad_scale;
  backprop(p, std::span<const int>(sample.tokens), AttentionMode::Full, acts, d, grads);
  return loss;
}

}  // namespace ddlm
