#pragma once

#include "ddlm/model.hpp"
#include "ddlm/prefill.hpp"
#include "ddlm/rng.hpp"
#include "ddlm/sequence.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <vector>

namespace ddlm {

enum class DecodeAlgorithm { MaskGit, Confident };
enum class FallbackKind { HighestConfidence, Random };
enum class ConfidenceMeasure { MaxProb, NegEntropy, Margin };
enum class ConfidenceSource { PreRevision, PostRevision };

struct DecodeConfig {
  int response_length = 16;
  int max_steps = 0;  // 0 means response_length
  double gamma = 0.9;
  double temperature = 0.0;
  double top_p = 1.0;
  DecodeAlgorithm algorithm = DecodeAlgorithm::Confident;
  int maskgit_k = 1;
  FallbackKind fallback = FallbackKind::HighestConfidence;
  int fallback_k = 1;
  ConfidenceMeasure confidence_measure = ConfidenceMeasure::MaxProb;
  ConfidenceSource confidence_source = ConfidenceSource::PreRevision;
  uint64_t seed = 0;

  int effective_max_steps() const { return max_steps > 0 ? max_steps : response_length; }

  void validate() const {
    require(response_length > 0, "DecodeConfig: response_length must be positive");
    require(gamma >= 0.0, "DecodeConfig: gamma must be >= 0");
    require(temperature >= 0.0, "DecodeConfig: temperature must be >= 0");
    require(top_p > 0.0 && top_p <= 1.0, "DecodeConfig: top_p must lie in (0, 1]");
    require(maskgit_k >= 1, "DecodeConfig: maskgit_k must be >= 1");
    require(fallback_k >= 1, "DecodeConfig: fallback_k must be >= 1");
  }
};

/// Tokens pinned at chosen answer slots before decoding starts. Negative
/// positions address from the end of the window, -1 being the last slot.
struct StructurePrior {
  std::vector<std::pair<int, int>> entries;  // (position, token id)

  bool empty() const { return entries.empty(); }

  std::vector<std::pair<int, int>> resolve(int response_length) const {
    std::vector<std::pair<int, int>> out;
    std::vector<char> used(size_t(response_length), 0);
    for (auto [pos, tok] : entries) {
      const int r = pos < 0 ? response_length + pos : pos;
      require(r >= 0 && r < response_length, "StructurePrior: position outside answer window");
      require(!used[size_t(r)], "StructurePrior: duplicate position");
      used[size_t(r)] = 1;
      out.emplace_back(r, tok);
    }
    return out;
  }
};

struct GenerationHistory {
  enum class SlotKind : uint8_t { Committed, Prior, Pad };
  struct Slot {
    SlotKind kind = SlotKind::Committed;
    int iteration = 0;  // 1-indexed; meaningful for Committed and Pad slots
  };
  std::vector<Slot> slots;
  int response_length = 0;
  int remaining_tokens = 0;  // slots not covered by priors
  int actual_iterations = 0;
};

struct DecodeStats {
  ForwardStats forward;
  std::vector<double> iteration_ms;
  std::vector<int> committed_per_iteration;
  double total_ms = 0.0;
};

struct DecodeResult {
  std::vector<int> window;         // full answer window after decoding
  std::vector<int> answer_tokens;  // window with the trailing pad run stripped
  GenerationHistory history;
  bool complete = true;  // false when max_steps ran out with MASK slots left
  DecodeStats stats;
};

/// Post-revision distribution of one logit row: temperature, then top-p
/// nucleus truncation, then renormalization. tau = 0 short-circuits to a
/// one-hot at the argmax (lowest index on ties).
template <typename Derived>
RowVec<typename Derived::Scalar> revise_probs(const Eigen::MatrixBase<Derived>& logits_row,
                                              double tau, double top_p) {
  using S = typename Derived::Scalar;
  require(tau >= 0.0, "revise_probs: temperature must be >= 0");
  require(top_p > 0.0 && top_p <= 1.0, "revise_probs: top_p must lie in (0, 1]");
  const int n = int(logits_row.size());
  require(n > 0, "revise_probs: empty row");

  if (tau == 0.0) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (logits_row(i) > logits_row(best)) best = i;
    require(std::isfinite(double(logits_row(best))), "revise_probs: no finite logit");
    RowVec<S> out = RowVec<S>::Zero(n);
    out(best) = S(1);
    return out;
  }

  RowVec<S> probs = softmax_row((logits_row / S(tau)).eval());
  if (top_p >= 1.0) return probs;

  // Keep the smallest high-probability prefix whose mass reaches top_p; the
  // top token always survives. Sort order breaks probability ties by index.
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs(a) != probs(b)) return probs(a) > probs(b);
    return a < b;
  });
  RowVec<S> kept = RowVec<S>::Zero(n);
  double cum = 0.0;
  for (int idx : order) {
    kept(idx) = probs(idx);
    cum += double(probs(idx));
    if (cum >= top_p) break;
  }
  return kept / kept.sum();
}

/// Scalar confidence of a probability vector; higher means more confident.
template <typename Derived>
double confidence(const Eigen::MatrixBase<Derived>& probs, ConfidenceMeasure measure) {
  const int n = int(probs.size());
  switch (measure) {
    case ConfidenceMeasure::MaxProb:
      return double(probs.maxCoeff());
    case ConfidenceMeasure::NegEntropy: {
      double h = 0.0;
      for (int i = 0; i < n; ++i) {
        const double p = double(probs(i));
        if (p > 0.0) h -= p * std::log(p);
      }
      return -h;
    }
    case ConfidenceMeasure::Margin: {
      double top1 = -1.0, top2 = -1.0;
      for (int i = 0; i < n; ++i) {
        const double p = double(probs(i));
        if (p > top1) {
          top2 = top1;
          top1 = p;
        } else if (p > top2) {
          top2 = p;
        }
      }
      return top1 - (top2 < 0.0 ? 0.0 : top2);
    }
  }
  fail("confidence: unknown measure");
}

/// Top-k selection over masked-slot confidences, saturating at the number of
/// slots. Ties break toward the lowest index. Returns indices into `conf`,
/// ascending.
inline std::vector<int> select_maskgit(const std::vector<double>& conf, int k) {
  require(!conf.empty(), "select_maskgit: no masked slots");
  require(k >= 1, "select_maskgit: k must be >= 1");
  const int n = int(conf.size());
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (conf[size_t(a)] != conf[size_t(b)]) return conf[size_t(a)] > conf[size_t(b)];
    return a < b;
  });
  order.resize(size_t(std::min(k, n)));
  std::sort(order.begin(), order.end());
  return order;
}

/// Threshold selection: every slot with confidence >= gamma. When none
/// clears the bar, falls back to the single highest-confidence slot or to k
/// uniform slots without replacement.
inline std::vector<int> select_confident(const std::vector<double>& conf, double gamma,
                                         FallbackKind fallback, int k, Rng& rng) {
  require(!conf.empty(), "select_confident: no masked slots");
  std::vector<int> out;
  for (int i = 0; i < int(conf.size()); ++i)
    if (conf[size_t(i)] >= gamma) out.push_back(i);
  if (!out.empty()) return out;

  if (fallback == FallbackKind::HighestConfidence) {
    int best = 0;
    for (int i = 1; i < int(conf.size()); ++i)
      if (conf[size_t(i)] > conf[size_t(best)]) best = i;
    return {best};
  }
  // Random(k): uniform draw without replacement, then ascending for
  // deterministic commit order.
  std::vector<int> pool(conf.size());
  std::iota(pool.begin(), pool.end(), 0);
  rng.shuffle(pool);
  pool.resize(size_t(std::min<size_t>(size_t(k), conf.size())));
  std::sort(pool.begin(), pool.end());
  return pool;
}

/// Per-iteration record for inspection and tests.
struct DecodeStepTrace {
  int iteration = 0;
  std::vector<int> masked_slots;
  Matrix<float> masked_logits;  // one row per masked slot (float snapshot)
  std::vector<int> selected;    // slot ids committed this iteration
  std::vector<int> sampled;     // tokens committed, aligned with selected
};

struct DecodeTrace {
  std::vector<DecodeStepTrace> steps;
};

namespace detail {

inline int strip_trailing_pads(const std::vector<int>& window, int pad_token) {
  int end = int(window.size());
  while (end > 0 && window[size_t(end - 1)] == pad_token) --end;
  return end;
}

template <typename S>
int sample_revised(const RowVec<S>& probs, double tau, Rng& rng) {
  if (tau == 0.0) {
    int best = 0;
    for (int i = 1; i < int(probs.size()); ++i)
      if (probs(i) > probs(best)) best = i;
    return best;
  }
  return rng.categorical(probs);
}

}  // namespace detail

namespace detail {

template <typename S>
DecodeResult decode_impl(const ModelParams<S>& p, std::span<const int> prompt,
                         const DecodeConfig& cfg, const StructurePrior& priors,
                         const KVCache<S>* cache, DecodeTrace* trace) {
  cfg.validate();
  const ModelConfig& mc = p.config;
  const int rl = cfg.response_length;
  require(int(prompt.size()) + rl <= mc.max_seq_len,
          "decode: prompt plus response window exceeds max_seq_len");
  const auto resolved = priors.resolve(rl);
  for (auto [slot, tok] : resolved)
    require(tok >= 0 && tok < mc.vocab_size, "decode: prior token out of vocab range");
  if (cache) {
    require(cache->prompt_length == int(prompt.size()),
            "decode: cache prompt length mismatch");
    require(cache->mode == AttentionMode::Full, "decode: decoding uses full attention");
  }

  DecodeResult res;
  res.window.assign(size_t(rl), mc.special.mask);
  res.history.slots.assign(size_t(rl), {});
  res.history.response_length = rl;
  res.history.remaining_tokens = rl - int(resolved.size());
  for (auto [slot, tok] : resolved) {
    res.window[size_t(slot)] = tok;
    res.history.slots[size_t(slot)].kind = GenerationHistory::SlotKind::Prior;
  }

  std::vector<int> full(prompt.begin(), prompt.end());
  full.insert(full.end(), res.window.begin(), res.window.end());
  const int prompt_len = int(prompt.size());

  Rng rng(cfg.seed);
  const int max_steps = cfg.effective_max_steps();
  const auto t_start = std::chrono::steady_clock::now();

  int iteration = 0;
  while (iteration < max_steps) {
    std::vector<int> masked;
    for (int s = 0; s < rl; ++s)
      if (res.window[size_t(s)] == mc.special.mask) masked.push_back(s);
    if (masked.empty()) break;
    ++iteration;
    const auto t0 = std::chrono::steady_clock::now();

    Matrix<S> answer_logits;
    if (cache) {
      answer_logits = step_with_cache(p, std::span<const int>(res.window), *cache,
                                      &res.stats.forward);
    } else {
      Matrix<S> logits = forward_ex(p, std::span<const int>(full), AttentionMode::Full,
                                    ForwardHooks<S>{.stats = &res.stats.forward});
      answer_logits = logits.bottomRows(rl);
    }
    // The mask token is not a legal output; suppressing it keeps every
    // committed slot committed.
    answer_logits.col(mc.special.mask).setConstant(neg_inf<S>());

    std::vector<double> conf(masked.size());
    std::vector<RowVec<S>> revised(masked.size());
    for (size_t i = 0; i < masked.size(); ++i) {
      const auto row = answer_logits.row(masked[i]);
      revised[i] = revise_probs(row, cfg.temperature, cfg.top_p);
      if (cfg.confidence_source == ConfidenceSource::PreRevision) {
        conf[i] = confidence(softmax_row(row), cfg.confidence_measure);
      } else {
        conf[i] = confidence(revised[i], cfg.confidence_measure);
      }
    }

    std::vector<int> picked =
        cfg.algorithm == DecodeAlgorithm::MaskGit
            ? select_maskgit(conf, cfg.maskgit_k)
            : select_confident(conf, cfg.gamma, cfg.fallback, cfg.fallback_k, rng);

    DecodeStepTrace step;
    if (trace) {
      step.iteration = iteration;
      step.masked_slots = masked;
      step.masked_logits.resize(Eigen::Index(masked.size()), answer_logits.cols());
      for (size_t i = 0; i < masked.size(); ++i)
        step.masked_logits.row(Eigen::Index(i)) =
            answer_logits.row(masked[i]).template cast<float>();
    }

    for (int idx : picked) {  // ascending slot order fixes the rng draw order
      const int slot = masked[size_t(idx)];
      const int tok = sample_revised(revised[size_t(idx)], cfg.temperature, rng);
      res.window[size_t(slot)] = tok;
      full[size_t(prompt_len + slot)] = tok;
      res.history.slots[size_t(slot)].iteration = iteration;
      if (trace) {
        step.selected.push_back(slot);
        step.sampled.push_back(tok);
      }
    }
    res.stats.committed_per_iteration.push_back(int(picked.size()));
    res.stats.iteration_ms.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count());
    if (trace) trace->steps.push_back(std::move(step));
  }

  res.stats.total_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start)
          .count();
  res.history.actual_iterations = iteration;
  res.complete = true;
  for (int tok : res.window)
    if (tok == mc.special.mask) res.complete = false;

  // Pad slots are flagged as such; they keep their commit iteration but are
  // reported separately from content tokens. Priors win over the pad flag.
  for (int s = 0; s < rl; ++s) {
    auto& slot = res.history.slots[size_t(s)];
    if (slot.kind != GenerationHistory::SlotKind::Prior &&
        res.window[size_t(s)] == mc.special.pad) {
      slot.kind = GenerationHistory::SlotKind::Pad;
    }
  }

  const int keep = strip_trailing_pads(res.window, mc.special.pad);
  res.answer_tokens.assign(res.window.begin(), res.window.begin() + keep);
  return res;
}

}  // namespace detail

/// Iterative parallel unmasking. The answer window starts as MASK except at
/// prior slots; each iteration computes confidences over the masked slots,
/// selects a subset, and samples each selected slot from its revised
/// distribution. Committed tokens are never overwritten.
template <typename S>
DecodeResult decode(const ModelParams<S>& p, std::span<const int> prompt,
                    const DecodeConfig& cfg, const StructurePrior& priors = {},
                    DecodeTrace* trace = nullptr) {
  return detail::decode_impl<S>(p, prompt, cfg, priors, nullptr, trace);
}

/// Cached variant: the cache must have been built over this prompt plus the
/// initial masked window; every iteration then runs through step_with_cache.
template <typename S>
DecodeResult decode(const ModelParams<S>& p, std::span<const int> prompt,
                    const DecodeConfig& cfg, const StructurePrior& priors,
                    const KVCache<S>& cache, DecodeTrace* trace = nullptr) {
  return detail::decode_impl<S>(p, prompt, cfg, priors, &cache, trace);
}

}  // namespace ddlm
